use std::path::{Path, PathBuf};

use regibox::boxnet::{train_stage1, BoxNetModel, Stage1Config, TextAnchors};
use regibox::eval::{
    dimension_ranking_csv, rank_classes_by_volume, ranking_csv, region_stats, run_protocol,
    score_domains, EvalReport, ExperimentConfig, Method, Protocol,
};
use regibox::probe::{predict, train_probe, ProbeConfig, ProbeModel};
use regibox::sampler::{augment_dataset, write_manifest, AugmentationConfig, AugmentedSet};
use regibox::seed;
use regibox::store::{write_embedding_file, DatasetBundle, EmbeddingSet};
use regibox::synth::{generate_bundle, BundleSpec, MeanLayout, SyntheticSpec};

use crate::config::{List, Resolver};
use crate::error::{usage, CliError, CliResult, Context, EXIT_DATA};
use crate::{AnalyzeArgs, BoxNetArgs, EvalArgs, ProbeArgs, Stage1Args, Stage2Args, SynthArgs};

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_echo(out: &Path, command: &str, r: &Resolver) -> CliResult<()> {
    write_file(&out.join(format!("{command}.config")), r.echo())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn load_bundle(dir: &Path) -> CliResult<DatasetBundle> {
    DatasetBundle::load(dir).context(format!("loading bundle {}", dir.display()))
}

fn resolve_stage1(a: BoxNetArgs, r: &mut Resolver, seed: u64) -> CliResult<Stage1Config> {
    let d = Stage1Config::default();
    let cfg = Stage1Config {
        alpha: r.value("alpha", a.alpha, d.alpha)?,
        epochs: r.value("stage1_epochs", a.stage1_epochs, d.epochs)?,
        batch_size: r.value("stage1_batch_size", a.stage1_batch_size, d.batch_size)?,
        learning_rate: r.value("stage1_lr", a.stage1_lr, d.learning_rate)?,
        weight_decay: r.value("stage1_weight_decay", a.stage1_weight_decay, d.weight_decay)?,
        hidden: r.optional("hidden", a.hidden)?.map(|l: List<usize>| l.0),
        activation: r.value("activation", a.activation, d.activation)?,
        temperature: r.value("temperature", a.temperature, d.temperature)?,
        raw_midpoint: r.value("raw_midpoint", a.raw_midpoint, d.raw_midpoint)?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_probe(a: ProbeArgs, r: &mut Resolver, seed: u64) -> CliResult<ProbeConfig> {
    let d = ProbeConfig::default();
    let cfg = ProbeConfig {
        epochs: r.value("probe_epochs", a.probe_epochs, d.epochs)?,
        batch_size: r.value("probe_batch_size", a.probe_batch_size, d.batch_size)?,
        learning_rate: r.value("probe_lr", a.probe_lr, d.learning_rate)?,
        weight_decay: r.value("probe_weight_decay", a.probe_weight_decay, d.weight_decay)?,
        bias: r.value("bias", a.bias, d.bias)?,
        select_on_val: r.value("select_on_val", a.select_on_val, d.select_on_val)?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(a: SynthArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new(config)?;
    let out: PathBuf = r.required("out", a.out)?;
    let mut base = SyntheticSpec::new(
        r.value("dim", a.dim, 16)?,
        r.value("classes", a.classes, 4)?,
        r.value("per_class", a.per_class, 100)?,
        r.value("sigma", a.sigma, 0.1)?,
        r.value("seed", a.seed, 0)?,
    );
    base.class_sigmas = r.optional("class_sigmas", a.class_sigmas)?.map(|l: List<f64>| l.0);
    base.layout = r.value("layout", a.layout, MeanLayout::Orthogonal)?;
    let spec = BundleSpec {
        base,
        eval_per_class: r.value("eval_per_class", a.eval_per_class, 50)?,
        shift_magnitude: Some(r.value("shift", a.shift, 0.5)?),
    };
    let bundle = generate_bundle(&spec)?;
    prepare_out(&out)?;
    for path in bundle.save(&out).context(format!("writing bundle to {}", out.display()))? {
        log::info!("wrote {}", path.display());
    }
    write_echo(&out, "synth", &r)
}

pub fn stage1(a: Stage1Args, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new(config)?;
    let data: PathBuf = r.required("data", a.data)?;
    let out: PathBuf = r.required("out", a.out)?;
    let root = r.value("seed", a.seed, 0)?;
    let cfg = resolve_stage1(a.boxnet, &mut r, seed::derive(root, "stage1"))?;
    let bundle = load_bundle(&data)?;
    let anchors = TextAnchors::from(&bundle.class_text);
    let outcome = train_stage1(&bundle.train, &bundle.val, &anchors, &cfg)?;
    let (first, last) = (&outcome.trace.initial, outcome.trace.epochs.last().expect("epochs >= 1"));
    log::info!(
        "stage1: loss {:.5} -> {:.5}, corner accuracy {:.4} -> {:.4}, kept epoch {}",
        first.total,
        last.total,
        first.corner_accuracy,
        last.corner_accuracy,
        outcome.trace.selected_epoch
    );
    prepare_out(&out)?;
    write_file(&out.join("boxnet.rgbm"), outcome.model.to_bytes()?)?;
    write_file(&out.join("boxnet_final.rgbm"), outcome.final_model.to_bytes()?)?;
    write_file(&out.join("trace.json"), to_json(&outcome.trace))?;
    write_echo(&out, "stage1", &r)
}

pub fn stage2(a: Stage2Args, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new(config)?;
    let data: PathBuf = r.required("data", a.data)?;
    let out: PathBuf = r.required("out", a.out)?;
    let root = r.value("seed", a.seed, 0)?;
    let samples = r.value("samples", a.samples, AugmentationConfig::default().samples_per_image)?;
    let boxnet: Option<PathBuf> = r.optional("boxnet", a.boxnet)?;
    let probe_cfg = resolve_probe(a.probe, &mut r, seed::derive(root, "probe"))?;
    let aug_cfg = AugmentationConfig {
        samples_per_image: samples,
        seed: seed::derive(root, "augment"),
        renormalize_samples: true,
    };
    let bundle = load_bundle(&data)?;
    let augmented = if samples == 0 {
        AugmentedSet {
            set: bundle.train.clone(),
            source_indices: (0..bundle.train.count()).collect(),
        }
    } else {
        let path = boxnet.ok_or_else(|| usage("--boxnet is required unless --samples is 0"))?;
        let model = BoxNetModel::load(&path).context(format!("loading {}", path.display()))?;
        augment_dataset(&bundle.train, &model, &aug_cfg)?
    };
    let fit = train_probe(&augmented.set, &bundle.val, bundle.n_classes(), &probe_cfg)?;
    log::info!(
        "stage2: {} rows ({} original), kept epoch {}",
        augmented.set.count(),
        bundle.train.count(),
        fit.selected_epoch
    );
    prepare_out(&out)?;
    let aug_path = out.join("augmented.rgbx");
    write_embedding_file(&augmented.set, &aug_path).context(aug_path.display())?;
    log::info!("wrote {}", aug_path.display());
    let manifest_path = out.join("augmented.json");
    write_manifest(&augmented.manifest(&aug_cfg), &manifest_path).context(manifest_path.display())?;
    write_file(&out.join("probe.rgbp"), fit.model.to_bytes()?)?;
    write_file(&out.join("probe_final.rgbp"), fit.final_model.to_bytes()?)?;
    let trace = serde_json::json!({
        "train_loss": fit.train_loss,
        "val_accuracy": fit.val_accuracy,
        "selected_epoch": fit.selected_epoch,
    });
    write_file(&out.join("probe_trace.json"), to_json(&trace))?;
    write_echo(&out, "stage2", &r)
}

pub fn eval(a: EvalArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new(config)?;
    let data: PathBuf = r.required("data", a.data)?;
    let out: PathBuf = r.required("out", a.out)?;
    let method = r.value("method", a.method, Method::Lare)?;
    let protocol = r.value("protocol", a.protocol, Protocol::Standard)?;
    let seeds: List<u64> = r.value("seeds", a.seeds, List(vec![0, 1, 2, 3, 4]))?;
    if seeds.0.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    let probe_path: Option<PathBuf> = r.optional("probe", a.probe)?;
    let samples = r.value("samples", a.samples, AugmentationConfig::default().samples_per_image)?;
    let cfg = ExperimentConfig {
        stage1: resolve_stage1(a.boxnet, &mut r, 0)?,
        augmentation: AugmentationConfig {
            samples_per_image: samples,
            ..AugmentationConfig::default()
        },
        probe: resolve_probe(a.probe_args, &mut r, 0)?,
    };
    let bundle = load_bundle(&data)?;
    let report = match probe_path {
        Some(path) => {
            if method == Method::ZeroShot {
                return Err(usage("--probe cannot be combined with --method zero-shot"));
            }
            if protocol != Protocol::Standard || seeds.0.len() != 1 {
                return Err(usage("--probe scores one checkpoint: use the standard protocol and a single seed"));
            }
            let model = ProbeModel::load(&path).context(format!("loading {}", path.display()))?;
            if model.dim != bundle.dim() || model.n_classes != bundle.n_classes() {
                return Err(CliError {
                    code: EXIT_DATA,
                    message: format!(
                        "probe {} is {}×{}, bundle has {} classes of dimension {}",
                        path.display(),
                        model.n_classes,
                        model.dim,
                        bundle.n_classes(),
                        bundle.dim()
                    ),
                });
            }
            let run = score_domains(&bundle, seeds.0[0], bundle.train.count(), |set: &EmbeddingSet| {
                predict(&model, set)
            })?;
            EvalReport::from_runs(method, &protocol.to_string(), vec![run])?
        }
        None => run_protocol(&bundle, protocol, method, &seeds.0, &cfg)?,
    };
    log::info!(
        "{method} {protocol}: in-domain {:.4} ± {:.4}{}",
        report.in_domain.mean,
        report.in_domain.std,
        report
            .out_domain
            .map(|s| format!(", out-of-domain {:.4} ± {:.4}", s.mean, s.std))
            .unwrap_or_default()
    );
    prepare_out(&out)?;
    let mut json = report.to_json();
    json.push('\n');
    write_file(&out.join("report.json"), json)?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    write_echo(&out, "eval", &r)
}

pub fn analyze(a: AnalyzeArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new(config)?;
    let data: PathBuf = r.required("data", a.data)?;
    let out: PathBuf = r.required("out", a.out)?;
    let boxnet: PathBuf = r.required("boxnet", a.boxnet)?;
    let split: String = r.value("split", a.split, "train".to_owned())?;
    let epsilon = r.value("epsilon", a.epsilon, 1e-12)?;
    let dims: Option<List<usize>> = r.optional("dims", a.dims)?;
    let bundle = load_bundle(&data)?;
    let set = match split.as_str() {
        "train" => &bundle.train,
        "val" => &bundle.val,
        "test_in" => &bundle.test_in_domain,
        "test_out" => bundle
            .test_out_domain
            .as_ref()
            .ok_or_else(|| CliError {
                code: EXIT_DATA,
                message: format!("{} has no test_out.rgbx", data.display()),
            })?,
        other => return Err(usage(format!("unknown split {other:?} (train, val, test_in, test_out)"))),
    };
    let model = BoxNetModel::load(&boxnet).context(format!("loading {}", boxnet.display()))?;
    let stats = region_stats(&model, set, bundle.n_classes(), epsilon)?;
    let names = &bundle.class_text.class_names;
    let ranking = rank_classes_by_volume(&stats);
    let volume_csv = ranking_csv(&ranking, names, |c| {
        stats.class_mean_log_volume[c].expect("ranked classes have images")
    });
    let dims = dims.map(|l| l.0).unwrap_or_else(|| (0..stats.dim()).collect());
    let dim_csv = dimension_ranking_csv(&stats, &dims, names)?;
    prepare_out(&out)?;
    write_file(&out.join("volume_ranking.csv"), volume_csv)?;
    write_file(&out.join("dimension_ranking.csv"), dim_csv)?;
    write_echo(&out, "analyze", &r)
}
