//! Acceptance criteria, one line each. Run with `--nocapture` to see the table.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regibox::boxnet::{
    box_volume_loss, check_gradient, class_consistency_loss, combined_loss, corners_from_raw,
    train_stage1, Activation, Batch, BoxNetModel, LossConfig, Stage1Config, TextAnchors,
};
use regibox::eval::{region_stats, run_protocol, ExperimentConfig, Method, Protocol};
use regibox::probe::ProbeModel;
use regibox::sampler::{sample_raw, AugmentationConfig};
use regibox::seed;
use regibox::store::{
    decode_class_text, decode_embedding_set, encode_class_text, encode_embedding_set,
    ClassTextEmbeddings, DatasetBundle, EmbeddingSet,
};
use regibox::synth::{generate_bundle, BundleSpec, SyntheticSpec};

type Verdict = Result<String, String>;

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn criterion(name: &'static str, f: impl FnOnce() -> Verdict) -> Line {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let line = Line {
        name,
        passed,
        detail,
        elapsed,
    };
    println!(
        "{} {:<28} {:>8.2}s  {}",
        if line.passed { "PASS" } else { "FAIL" },
        line.name,
        line.elapsed.as_secs_f64(),
        line.detail
    );
    line
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn axis(d: usize, k: usize, sign: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = sign;
    v
}

fn gradient_correctness() -> Verdict {
    const INSTANCES: u64 = 24;
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut compared = 0;
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let d = rng.random_range(2..=8);
        let n_classes = rng.random_range(2..=4);
        let n_items = rng.random_range(1..=16);
        let model = BoxNetModel::init(vec![d, d, 2 * d], Activation::Softplus, s).unwrap();
        let anchors = TextAnchors::new((0..n_classes).map(|_| unit(&mut rng, d)).collect()).unwrap();
        let batch = Batch {
            inputs: (0..n_items).map(|_| unit(&mut rng, d)).collect(),
            labels: (0..n_items).map(|_| rng.random_range(0..n_classes as u32)).collect(),
        };
        let cfg = LossConfig {
            alpha: rng.random_range(0.0..=1.0),
            ..LossConfig::default()
        };
        let c = check_gradient(&model, &batch, &anchors, &cfg, 1e-4).unwrap();
        if c.skipped * 20 > model.n_params() {
            return Err(format!("instance {s}: {} of {} parameters cross a kink", c.skipped, model.n_params()));
        }
        worst = worst.max(c.max_rel_error);
        skipped += c.skipped;
        compared += c.compared;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-3 && secs < 10.0,
        format!("{INSTANCES} instances, {compared} entries, max rel error {worst:.2e}, {skipped} kink skips, {secs:.2}s"),
    )
}

fn loss_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let d = rng.random_range(2..=12);
        let c = rng.random_range(2..=6);
        let n = rng.random_range(1..=24);
        let model = BoxNetModel::init(vec![d, d, 2 * d], Activation::Softplus, trial).unwrap();
        let anchors = TextAnchors::new((0..c).map(|_| unit(&mut rng, d)).collect()).unwrap();
        let batch = Batch {
            inputs: (0..n).map(|_| unit(&mut rng, d)).collect(),
            labels: (0..n).map(|_| rng.random_range(0..c as u32)).collect(),
        };
        let alpha = rng.random_range(0.0..=1.0);
        let cfg = LossConfig {
            alpha,
            ..LossConfig::default()
        };
        let out = combined_loss(&batch, &model, &anchors, &cfg).unwrap();
        let p = out.parts;
        let mix = (1.0 - alpha) * p.box_volume + alpha * (p.cc_lower + p.cc_upper + p.cc_mid) / 3.0;
        worst = worst.max((out.total - mix).abs());

        let at0 = combined_loss(&batch, &model, &anchors, &LossConfig { alpha: 0.0, ..cfg }).unwrap();
        let at1 = combined_loss(&batch, &model, &anchors, &LossConfig { alpha: 1.0, ..cfg }).unwrap();
        if at0.total != at0.parts.box_volume {
            return Err(format!("trial {trial}: alpha=0 total {} != L_BV {}", at0.total, at0.parts.box_volume));
        }
        let cc = (at1.parts.cc_lower + at1.parts.cc_upper + at1.parts.cc_mid) / 3.0;
        if at1.total != cc {
            return Err(format!("trial {trial}: alpha=1 total {} != CC mean {cc}", at1.total));
        }
    }
    check(worst <= 1e-6, format!("100 pairs, max |total - mix| {worst:.2e}, endpoints exact"))
}

fn loss_oracles() -> Verdict {
    let d = 5;
    let same = box_volume_loss(&[(axis(d, 0, 1.0), axis(d, 0, 1.0))]).unwrap();
    let antipodal = box_volume_loss(&[(axis(d, 0, 1.0), axis(d, 0, -1.0))]).unwrap();
    let orthogonal = box_volume_loss(&[(axis(d, 0, 1.0), axis(d, 1, 1.0))]).unwrap();
    if (same, antipodal, orthogonal) != (1.0, -1.0, 0.0) {
        return Err(format!("L_BV degenerate/antipodal/orthogonal = {same}/{antipodal}/{orthogonal}"));
    }
    let mut worst = 0.0f64;
    for n_classes in [2usize, 3, 4, 10, 40] {
        let d = n_classes + 1;
        let anchors = TextAnchors::new((0..n_classes).map(|k| axis(d, k, 1.0)).collect()).unwrap();
        let ce = class_consistency_loss(&[axis(d, n_classes, 1.0)], &[0], &anchors, 1.0).unwrap();
        worst = worst.max((ce - (n_classes as f64).ln()).abs());
    }
    check(worst <= 1e-6, format!("L_BV 1/-1/0 exact, uniform CE max |ce - ln n| {worst:.2e}"))
}

fn box_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut passes = 0;
    for m in 0..100u64 {
        let d = rng.random_range(1..=24);
        let act = [Activation::Softplus, Activation::Tanh, Activation::Identity][m as usize % 3];
        let model = BoxNetModel::init(vec![d, d + 3, 2 * d], act, m).unwrap();
        for _ in 0..100 {
            let (a, b) = model.forward(&unit(&mut rng, d)).unwrap();
            let bx = corners_from_raw(&a, &b).unwrap();
            if bx.lower.iter().zip(&bx.upper).any(|(l, u)| l > u) {
                return Err(format!("lower > upper after {passes} passes"));
            }
            passes += 1;
        }
    }
    let mut samples = 0;
    for _ in 0..100 {
        let d = rng.random_range(1..=32);
        let bx = corners_from_raw(&unit(&mut rng, d), &unit(&mut rng, d)).unwrap();
        for p in sample_raw(&bx, 100, &mut rng) {
            if !bx.contains(&p) {
                return Err(format!("sample left its box after {samples} samples"));
            }
            samples += 1;
        }
    }
    check(
        passes == 10_000 && samples == 10_000,
        format!("{passes} forward passes ordered, {samples} samples inside"),
    )
}

fn stage1_behavior() -> Verdict {
    let spec = BundleSpec {
        base: SyntheticSpec::new(16, 4, 1000, 0.1, 11),
        eval_per_class: 50,
        shift_magnitude: None,
    };
    let bundle = generate_bundle(&spec).unwrap();
    let cfg = Stage1Config {
        seed: 11,
        ..Stage1Config::default()
    };
    if cfg.alpha != 0.5 || cfg.epochs != 100 {
        return Err(format!("defaults moved: alpha {} epochs {}", cfg.alpha, cfg.epochs));
    }
    let start = Instant::now();
    let out = train_stage1(&bundle.train, &bundle.val, &TextAnchors::from(&bundle.class_text), &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let first = &out.trace.initial;
    let last = out.trace.epochs.last().unwrap();
    check(
        last.total < first.total && last.corner_accuracy >= 0.95 && secs < 60.0,
        format!(
            "loss {:.4} -> {:.4}, corner+midpoint train accuracy {:.4}, {secs:.1}s",
            first.total, last.total, last.corner_accuracy
        ),
    )
}

/// Stage 1 settings for the end-to-end comparisons.
fn recipe() -> ExperimentConfig {
    ExperimentConfig {
        stage1: Stage1Config {
            alpha: 0.8,
            learning_rate: 1e-2,
            ..Stage1Config::default()
        },
        augmentation: AugmentationConfig {
            samples_per_image: 5,
            ..AugmentationConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn comparison_bundle() -> DatasetBundle {
    generate_bundle(&BundleSpec {
        base: SyntheticSpec::new(16, 10, 200, 0.25, 7),
        eval_per_class: 200,
        shift_magnitude: Some(0.5),
    })
    .unwrap()
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ood_improvement(bundle: &DatasetBundle) -> Verdict {
    let start = Instant::now();
    let cfg = recipe();
    let lare = run_protocol(bundle, Protocol::Standard, Method::Lare, &SEEDS, &cfg).unwrap();
    let probe = run_protocol(bundle, Protocol::Standard, Method::Probe, &SEEDS, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (lo, po) = (lare.out_domain.unwrap().mean, probe.out_domain.unwrap().mean);
    let (li, pi) = (lare.in_domain.mean, probe.in_domain.mean);
    check(
        lo >= po && (li - pi).abs() <= 0.02 && secs < 300.0,
        format!("out-of-domain LARE {lo:.4} vs probe {po:.4}; in-domain {li:.4} vs {pi:.4}; {secs:.1}s"),
    )
}

fn few_shot(bundle: &DatasetBundle) -> Verdict {
    let cfg = recipe();
    let mut parts = Vec::new();
    let mut ok = true;
    for n in [5, 10, 25] {
        let p = Protocol::FewShot(n);
        let lare = run_protocol(bundle, p, Method::Lare, &SEEDS, &cfg).unwrap().in_domain.mean;
        let probe = run_protocol(bundle, p, Method::Probe, &SEEDS, &cfg).unwrap().in_domain.mean;
        ok &= lare >= probe;
        parts.push(format!("n={n}: {lare:.4} vs {probe:.4}"));
    }
    check(ok, format!("LARE vs probe {}", parts.join(", ")))
}

fn imbalanced(bundle: &DatasetBundle) -> Verdict {
    let cfg = recipe();
    let p = Protocol::Imbalanced { percent: 30.0, n: 5 };
    let lare = run_protocol(bundle, p, Method::Lare, &SEEDS, &cfg).unwrap().in_domain.mean;
    let probe = run_protocol(bundle, p, Method::Probe, &SEEDS, &cfg).unwrap().in_domain.mean;
    check(lare >= probe, format!("30% of classes at 5: LARE {lare:.4} vs probe {probe:.4}"))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn region_oracle() -> Verdict {
    const CLASSES: usize = 10;
    let sigmas: Vec<f64> = (0..CLASSES).map(|c| 0.05 + 0.25 * c as f64 / 9.0).collect();
    let mut pooled = vec![0.0; CLASSES];
    let mut per_seed = Vec::new();
    for s in SEEDS {
        let mut base = SyntheticSpec::new(16, CLASSES, 200, 0.1, 100 + s);
        base.class_sigmas = Some(sigmas.clone());
        let bundle = generate_bundle(&BundleSpec {
            base,
            eval_per_class: 50,
            shift_magnitude: None,
        })
        .unwrap();
        let cfg = Stage1Config {
            seed: seed::derive(s, "stage1"),
            ..recipe().stage1
        };
        let out = train_stage1(&bundle.train, &bundle.val, &TextAnchors::from(&bundle.class_text), &cfg).unwrap();
        let stats = region_stats(&out.model, &bundle.train, CLASSES, 1e-12).unwrap();
        let lv: Vec<f64> = stats.class_mean_log_volume.iter().map(|v| v.unwrap()).collect();
        per_seed.push(spearman(&sigmas, &lv));
        for (p, v) in pooled.iter_mut().zip(&lv) {
            *p += v / SEEDS.len() as f64;
        }
    }
    let rho = spearman(&sigmas, &pooled);
    let seeds: Vec<String> = per_seed.iter().map(|r| format!("{r:.2}")).collect();
    check(
        rho >= 0.8,
        format!("Spearman(sigma, mean log-volume) = {rho:.3} over 5 seeds (per seed {})", seeds.join(" ")),
    )
}

fn regibox_in(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_regibox"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn cli_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 5] = [
        &["synth", "--out", "d", "--dim", "8", "--classes", "3", "--per-class", "60", "--seed", "2"],
        &["stage1", "--data", "d", "--out", "s1", "--seed", "2", "--stage1-epochs", "10"],
        &[
            "stage2", "--data", "d", "--out", "s2", "--seed", "2", "--boxnet", "s1/boxnet.rgbm", "--samples", "3",
            "--probe-epochs", "10",
        ],
        &[
            "eval", "--data", "d", "--out", "e", "--seeds", "0,1", "--stage1-epochs", "5", "--probe-epochs", "5",
        ],
        &["analyze", "--data", "d", "--out", "a", "--boxnet", "s1/boxnet.rgbm"],
    ];
    let mut runs = Vec::new();
    for tag in ["first", "second"] {
        let root = tmp.path().join(tag);
        std::fs::create_dir_all(&root).unwrap();
        for args in steps {
            regibox_in(&root, args)?;
        }
        runs.push(tree(&root));
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    check(
        differing.is_empty() && runs[0].len() == runs[1].len(),
        format!("5 commands, {} files compared, {} differ {differing:?}", runs[0].len(), differing.len()),
    )
}

fn rejects_corruption<T>(bytes: &[u8], decode: impl Fn(&[u8]) -> regibox::Result<T>) -> Result<usize, String> {
    let mut cases = 0;
    let mut bad = bytes.to_vec();
    bad[0] ^= 0xFF;
    if decode(&bad).is_ok() {
        return Err("bad magic accepted".into());
    }
    let mut bad = bytes.to_vec();
    bad[4] = bad[4].wrapping_add(1);
    if decode(&bad).is_ok() {
        return Err("bad version accepted".into());
    }
    cases += 2;
    for cut in 0..bytes.len() {
        if decode(&bytes[..cut]).is_ok() {
            return Err(format!("truncation to {cut} bytes accepted"));
        }
        cases += 1;
    }
    let mut long = bytes.to_vec();
    long.push(0);
    if decode(&long).is_ok() {
        return Err("trailing byte accepted".into());
    }
    Ok(cases + 1)
}

fn format_suite() -> Verdict {
    let rows = vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 2.0, 2.0]];
    let set = EmbeddingSet::from_rows(3, &rows, vec![2, 0, 1]).unwrap();
    let text = ClassTextEmbeddings::new(2, vec![1.0, 0.0, 0.0, 1.0], vec!["wren".into(), "jay ✓".into()]).unwrap();
    let mut boxnet = BoxNetModel::init(vec![3, 5, 6], Activation::Softplus, 3).unwrap();
    boxnet.quantize();
    let mut probe = ProbeModel::zeros(3, 3);
    probe.weights = vec![0.5, -0.25, 1.0, 0.0, 2.0, -3.0, 1e-3, 7.0, -0.125];
    probe.bias = vec![0.0, 1.0, -1.0];
    probe.quantize();

    let x = encode_embedding_set(&set).unwrap();
    let back = decode_embedding_set(&x).unwrap();
    if encode_embedding_set(&back).unwrap() != x
        || back.data.iter().zip(&set.data).any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err("RGBX round-trip not bit-exact".into());
    }
    let t = encode_class_text(&text).unwrap();
    if decode_class_text(&t).unwrap() != text {
        return Err("RGBT round-trip changed the table".into());
    }
    let m = boxnet.to_bytes().unwrap();
    if BoxNetModel::from_bytes(&m).unwrap().to_bytes().unwrap() != m {
        return Err("RGBM round-trip not bit-exact".into());
    }
    let p = probe.to_bytes().unwrap();
    if ProbeModel::from_bytes(&p).unwrap() != probe {
        return Err("RGBP round-trip changed the probe".into());
    }

    let mut cases = rejects_corruption(&x, decode_embedding_set).map_err(|e| format!("RGBX: {e}"))?;
    cases += rejects_corruption(&t, decode_class_text).map_err(|e| format!("RGBT: {e}"))?;
    cases += rejects_corruption(&m, BoxNetModel::from_bytes).map_err(|e| format!("RGBM: {e}"))?;
    cases += rejects_corruption(&p, ProbeModel::from_bytes).map_err(|e| format!("RGBP: {e}"))?;

    let payload = 16 + 4 * set.count();
    for (what, value) in [("off-norm row", 0.1f32), ("NaN", f32::NAN), ("infinity", f32::INFINITY)] {
        let mut bad = x.clone();
        bad[payload..payload + 4].copy_from_slice(&value.to_le_bytes());
        if decode_embedding_set(&bad).is_ok() {
            return Err(format!("RGBX with {what} accepted"));
        }
        cases += 1;
    }
    let crossed = [
        decode_class_text(&x).is_err(),
        decode_embedding_set(&t).is_err(),
        ProbeModel::from_bytes(&m).is_err(),
        BoxNetModel::from_bytes(&p).is_err(),
    ];
    if crossed.contains(&false) {
        return Err("a file was accepted by the wrong decoder".into());
    }
    cases += crossed.len();
    Ok(format!("4 formats round-trip, {cases} corrupt inputs rejected"))
}

#[test]
fn acceptance() {
    let bundle = comparison_bundle();
    let lines = vec![
        criterion("gradient correctness", gradient_correctness),
        criterion("loss identity", loss_identity),
        criterion("loss value oracles", loss_oracles),
        criterion("box invariants", box_invariants),
        criterion("stage 1 on synthetic data", stage1_behavior),
        criterion("out-of-domain improvement", || ood_improvement(&bundle)),
        criterion("few-shot trend", || few_shot(&bundle)),
        criterion("imbalanced protocol", || imbalanced(&bundle)),
        criterion("region statistics oracle", region_oracle),
        criterion("cli determinism", cli_determinism),
        criterion("format suite", format_suite),
    ];
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
