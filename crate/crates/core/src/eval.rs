//! Accuracy metrics, region statistics, class rankings and experiment protocols.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::boxnet::{corners_from_raw, train_stage1, BoxNetModel, Stage1Config, TextAnchors};
use crate::error::{Error, Result};
use crate::probe::{predict, train_probe, zero_shot_predict, ProbeConfig};
use crate::sampler::{augment_dataset, AugmentationConfig};
use crate::seed;
use crate::store::{DatasetBundle, EmbeddingSet};

/// Default clamp for zero side lengths in log-volumes.
pub const LOG_VOLUME_EPSILON: f64 = 1e-12;

pub fn accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    Ok(correct_count(preds, labels) as f64 / preds.len() as f64)
}

fn correct_count(preds: &[u32], labels: &[u32]) -> usize {
    preds.iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Pooled accuracy `Σcorrect / Σtotal` over several domains.
pub fn extended_accuracy(per_domain: &[(usize, usize)]) -> Result<f64> {
    if per_domain.is_empty() {
        return Err(Error::InvalidArgument("no domains given".into()));
    }
    if per_domain.iter().any(|&(c, t)| t == 0 || c > t) {
        return Err(Error::InvalidArgument(
            "every domain needs a positive total no smaller than its correct count".into(),
        ));
    }
    let correct: usize = per_domain.iter().map(|d| d.0).sum();
    let total: usize = per_domain.iter().map(|d| d.1).sum();
    Ok(correct as f64 / total as f64)
}

/// `Σ_j ln(max(side_j, ε))`, the log of the box hypervolume with zero sides clamped.
pub fn log_volume(sides: &[f64], epsilon: f64) -> f64 {
    sides.iter().map(|&s| s.max(epsilon).ln()).sum()
}

/// Per-image box sizes and their per-class averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub labels: Vec<u32>,
    pub log_volume: Vec<f64>,
    pub side_lengths: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
    /// `None` for classes without images.
    pub class_mean_log_volume: Vec<Option<f64>>,
    pub class_mean_sides: Vec<Option<Vec<f64>>>,
}

impl RegionStats {
    /// Aggregates per-image boxes given as side-length vectors.
    pub fn from_sides(
        side_lengths: Vec<Vec<f64>>,
        labels: Vec<u32>,
        n_classes: usize,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if side_lengths.len() != labels.len() {
            return Err(Error::InvalidArgument("one label per box required".into()));
        }
        let dim = side_lengths.first().map_or(0, Vec::len);
        let log_volume: Vec<f64> = side_lengths.iter().map(|s| log_volume(s, epsilon)).collect();
        let mut class_counts = vec![0usize; n_classes];
        let mut vol_sum = vec![0.0; n_classes];
        let mut side_sum = vec![vec![0.0; dim]; n_classes];
        for (row, ((sides, &lv), &y)) in side_lengths.iter().zip(&log_volume).zip(&labels).enumerate() {
            let c = y as usize;
            if c >= n_classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: y,
                    n_classes,
                });
            }
            class_counts[c] += 1;
            vol_sum[c] += lv;
            side_sum[c].iter_mut().zip(sides).for_each(|(a, s)| *a += s);
        }
        let class_mean_log_volume = (0..n_classes)
            .map(|c| (class_counts[c] > 0).then(|| vol_sum[c] / class_counts[c] as f64))
            .collect();
        let class_mean_sides = (0..n_classes)
            .map(|c| {
                (class_counts[c] > 0).then(|| {
                    side_sum[c]
                        .iter()
                        .map(|s| s / class_counts[c] as f64)
                        .collect()
                })
            })
            .collect();
        Ok(RegionStats {
            labels,
            log_volume,
            side_lengths,
            class_counts,
            class_mean_log_volume,
            class_mean_sides,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn dim(&self) -> usize {
        self.side_lengths.first().map_or(0, Vec::len)
    }
}

/// Box statistics of every image in `set` under `model`.
pub fn region_stats(
    model: &BoxNetModel,
    set: &EmbeddingSet,
    n_classes: usize,
    epsilon: f64,
) -> Result<RegionStats> {
    if set.dim != model.dim() {
        return Err(Error::DimMismatch {
            expected: model.dim(),
            found: set.dim,
        });
    }
    let sides = (0..set.count())
        .map(|i| {
            let (a, b) = model.forward(&set.row_f64(i))?;
            Ok(corners_from_raw(&a, &b)?.side_lengths())
        })
        .collect::<Result<Vec<_>>>()?;
    RegionStats::from_sides(sides, set.labels.clone(), n_classes, epsilon)
}

/// Sorts classes by a statistic, descending, ties to the lower index; classes
/// without a statistic are skipped.
fn rank_by(stat: impl Fn(usize) -> Option<f64>, n_classes: usize) -> Vec<usize> {
    let mut present: Vec<(usize, f64)> = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        match stat(c) {
            Some(v) => present.push((c, v)),
            None => log::warn!("class {c} has no images and is left out of the ranking"),
        }
    }
    present.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    present.into_iter().map(|(c, _)| c).collect()
}

/// Classes by mean log-volume, largest first.
pub fn rank_classes_by_volume(stats: &RegionStats) -> Vec<usize> {
    rank_by(|c| stats.class_mean_log_volume[c], stats.n_classes())
}

/// Classes by mean side length along `dim_index`, longest first.
pub fn rank_classes_by_dimension(stats: &RegionStats, dim_index: usize) -> Result<Vec<usize>> {
    if dim_index >= stats.dim() {
        return Err(Error::InvalidArgument(format!(
            "dimension {dim_index} is out of range for {} dimensions",
            stats.dim()
        )));
    }
    Ok(rank_by(
        |c| stats.class_mean_sides[c].as_ref().map(|s| s[dim_index]),
        stats.n_classes(),
    ))
}

/// `rank,class_name,statistic` rows (rank is 1-based).
pub fn ranking_csv(ranking: &[usize], class_names: &[String], stat: impl Fn(usize) -> f64) -> String {
    let mut out = String::from("rank,class_name,statistic\n");
    for (r, &c) in ranking.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", r + 1, csv_field(&class_names[c]), stat(c));
    }
    out
}

/// `dimension,rank,class_name,statistic` rows for several dimensions.
pub fn dimension_ranking_csv(
    stats: &RegionStats,
    dims: &[usize],
    class_names: &[String],
) -> Result<String> {
    let mut out = String::from("dimension,rank,class_name,statistic\n");
    for &d in dims {
        let ranking = rank_classes_by_dimension(stats, d)?;
        for (r, &c) in ranking.iter().enumerate() {
            let side = stats.class_mean_sides[c].as_ref().map_or(0.0, |s| s[d]);
            let _ = writeln!(out, "{d},{},{},{side}", r + 1, csv_field(&class_names[c]));
        }
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

// ---------------------------------------------------------------------------
// Protocols

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    Standard,
    /// Keep `n` training items per class.
    FewShot(usize),
    /// Reduce a random `percent`% of classes to `n` training items each.
    Imbalanced { percent: f64, n: usize },
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Standard => write!(f, "standard"),
            Protocol::FewShot(n) => write!(f, "few-shot:{n}"),
            Protocol::Imbalanced { percent, n } => write!(f, "imbalanced:{percent}:{n}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// `standard`, `few-shot:N` or `imbalanced:X:N`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse protocol {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["standard"] => Ok(Protocol::Standard),
            ["few-shot" | "few_shot", n] => Ok(Protocol::FewShot(n.parse().map_err(|_| bad())?)),
            ["imbalanced", x, n] => {
                let percent: f64 = x.trim_end_matches('%').parse().map_err(|_| bad())?;
                if !(0.0..=100.0).contains(&percent) {
                    return Err(bad());
                }
                Ok(Protocol::Imbalanced {
                    percent,
                    n: n.parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroShot,
    /// Linear probe on the original training embeddings only.
    Probe,
    /// Box network, box-sample augmentation, then a linear probe.
    Lare,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ZeroShot => "zero-shot",
            Method::Probe => "probe",
            Method::Lare => "lare",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-shot" | "zero_shot" => Ok(Method::ZeroShot),
            "probe" => Ok(Method::Probe),
            "lare" => Ok(Method::Lare),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Seeded random subset of `n` indices from `pool`, returned in ascending order.
fn pick(pool: &[usize], n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut chosen: Vec<usize> = pool.choose_multiple(rng, n).copied().collect();
    chosen.sort_unstable();
    chosen
}

/// Applies a protocol's training-set reduction. Row order is preserved.
pub fn apply_protocol(
    train: &EmbeddingSet,
    n_classes: usize,
    protocol: Protocol,
    seed: u64,
) -> Result<EmbeddingSet> {
    let by_class = train.indices_by_class(n_classes);
    let mut rng = seed::rng(seed::derive(seed, "protocol"));
    let keep: Vec<usize> = match protocol {
        Protocol::Standard => return Ok(train.clone()),
        Protocol::FewShot(n) => {
            let mut keep = Vec::new();
            for (c, pool) in by_class.iter().enumerate() {
                if n > pool.len() {
                    return Err(Error::InvalidArgument(format!(
                        "few-shot {n} exceeds the {} items of class {c}",
                        pool.len()
                    )));
                }
                keep.extend(pick(pool, n, &mut rng));
            }
            keep
        }
        Protocol::Imbalanced { percent, n } => {
            let n_reduced = ((percent / 100.0) * n_classes as f64).round() as usize;
            let classes: Vec<usize> = (0..n_classes).collect();
            let reduced = pick(&classes, n_reduced.min(n_classes), &mut rng);
            let mut keep = Vec::new();
            for (c, pool) in by_class.iter().enumerate() {
                if reduced.binary_search(&c).is_ok() {
                    if n > pool.len() {
                        return Err(Error::InvalidArgument(format!(
                            "imbalanced N={n} exceeds the {} items of class {c}",
                            pool.len()
                        )));
                    }
                    keep.extend(pick(pool, n, &mut rng));
                } else {
                    keep.extend_from_slice(pool);
                }
            }
            keep
        }
    };
    let mut keep = keep;
    keep.sort_unstable();
    Ok(train.subset(&keep))
}

/// Hyperparameters for the trained methods; their seeds are replaced per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub stage1: Stage1Config,
    pub augmentation: AugmentationConfig,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl DomainScore {
    fn new(preds: &[u32], labels: &[u32]) -> Result<Self> {
        Ok(DomainScore {
            correct: correct_count(preds, labels),
            total: labels.len(),
            accuracy: accuracy(preds, labels)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train_count: usize,
    pub in_domain: DomainScore,
    pub out_domain: Option<DomainScore>,
    pub extended: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub protocol: String,
    pub per_seed: Vec<SeedResult>,
    pub in_domain: Summary,
    pub out_domain: Option<Summary>,
    pub extended: Summary,
}

impl EvalReport {
    pub fn from_runs(method: Method, protocol: &str, per_seed: Vec<SeedResult>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one run".into()));
        }
        let in_domain = Summary::of(&per_seed.iter().map(|r| r.in_domain.accuracy).collect::<Vec<_>>());
        let out: Option<Vec<f64>> = per_seed
            .iter()
            .map(|r| r.out_domain.map(|d| d.accuracy))
            .collect();
        let extended = Summary::of(&per_seed.iter().map(|r| r.extended).collect::<Vec<_>>());
        Ok(EvalReport {
            method,
            protocol: protocol.to_owned(),
            in_domain,
            out_domain: out.map(|v| Summary::of(&v)),
            extended,
            per_seed,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per seed followed by `mean` and `std` rows; a missing domain leaves its column empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,in_domain,out_domain,extended\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.per_seed {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.seed,
                r.in_domain.accuracy,
                opt(r.out_domain.map(|d| d.accuracy)),
                r.extended
            );
        }
        let _ = writeln!(
            out,
            "mean,{},{},{}",
            self.in_domain.mean,
            opt(self.out_domain.map(|s| s.mean)),
            self.extended.mean
        );
        let _ = writeln!(
            out,
            "std,{},{},{}",
            self.in_domain.std,
            opt(self.out_domain.map(|s| s.std)),
            self.extended.std
        );
        out
    }
}

/// Scores predictions on the in-domain and (optional) out-of-domain test sets.
pub fn score_domains(
    bundle: &DatasetBundle,
    seed: u64,
    train_count: usize,
    mut classify: impl FnMut(&EmbeddingSet) -> Result<Vec<u32>>,
) -> Result<SeedResult> {
    let in_domain = DomainScore::new(&classify(&bundle.test_in_domain)?, &bundle.test_in_domain.labels)?;
    let out_domain = match &bundle.test_out_domain {
        Some(set) => Some(DomainScore::new(&classify(set)?, &set.labels)?),
        None => None,
    };
    let mut pooled = vec![(in_domain.correct, in_domain.total)];
    if let Some(d) = out_domain {
        pooled.push((d.correct, d.total));
    }
    Ok(SeedResult {
        seed,
        train_count,
        in_domain,
        out_domain,
        extended: extended_accuracy(&pooled)?,
    })
}

/// Runs one method end to end for one seed.
pub fn run_once(
    bundle: &DatasetBundle,
    protocol: Protocol,
    method: Method,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<SeedResult> {
    let n_classes = bundle.n_classes();
    let train = apply_protocol(&bundle.train, n_classes, protocol, seed)?;
    match method {
        Method::ZeroShot => score_domains(bundle, seed, train.count(), |set| {
            zero_shot_predict(&bundle.class_text, set)
        }),
        Method::Probe | Method::Lare => {
            let probe_cfg = ProbeConfig {
                seed: seed::derive(seed, "probe"),
                ..cfg.probe.clone()
            };
            let fit_set = if method == Method::Lare {
                let stage1 = Stage1Config {
                    seed: seed::derive(seed, "stage1"),
                    ..cfg.stage1.clone()
                };
                let anchors = TextAnchors::from(&bundle.class_text);
                let boxes = train_stage1(&train, &bundle.val, &anchors, &stage1)?;
                let aug = AugmentationConfig {
                    seed: seed::derive(seed, "augment"),
                    ..cfg.augmentation
                };
                augment_dataset(&train, &boxes.model, &aug)?.set
            } else {
                train.clone()
            };
            let fit = train_probe(&fit_set, &bundle.val, n_classes, &probe_cfg)?;
            score_domains(bundle, seed, train.count(), |set| predict(&fit.model, set))
        }
    }
}

/// Runs a method under a protocol for every seed and summarizes mean ± std.
pub fn run_protocol(
    bundle: &DatasetBundle,
    protocol: Protocol,
    method: Method,
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    bundle.validate()?;
    let runs = seeds
        .iter()
        .map(|&s| run_once(bundle, protocol, method, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_runs(method, &protocol.to_string(), runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn extended_is_pooled() {
        let e = extended_accuracy(&[(80, 100), (30, 50)]).unwrap();
        assert!((e - 110.0 / 150.0).abs() < 1e-15);
        // mean of per-domain accuracies would be 0.7
        assert!((e - 0.7).abs() > 0.03);
        assert_eq!(extended_accuracy(&[(7, 10)]).unwrap(), 0.7);
        assert_eq!(extended_accuracy(&[(10, 10), (0, 10)]).unwrap(), 0.5);
        assert!(extended_accuracy(&[]).is_err());
    }

    #[test]
    fn log_volume_cases() {
        assert_eq!(log_volume(&[1.0, 1.0, 1.0], 1e-12), 0.0);
        assert!((log_volume(&[0.5, 0.5], 1e-12) - (-1.3863)).abs() < 1e-4);
        let d = 4;
        assert_eq!(log_volume(&vec![0.0; d], 1e-12), d as f64 * 1e-12f64.ln());
    }

    #[test]
    fn volume_ranking_order_and_ties() {
        let stats = RegionStats::from_sides(
            vec![vec![(-3.0f64).exp()], vec![(-1.0f64).exp()]],
            vec![0, 1],
            2,
            1e-12,
        )
        .unwrap();
        assert_eq!(rank_classes_by_volume(&stats), vec![1, 0]);
        let tied = RegionStats::from_sides(vec![vec![0.5], vec![0.5]], vec![1, 0], 2, 1e-12).unwrap();
        assert_eq!(rank_classes_by_volume(&tied), vec![0, 1]);
    }

    #[test]
    fn empty_class_is_skipped() {
        let stats = RegionStats::from_sides(vec![vec![0.5]], vec![1], 3, 1e-12).unwrap();
        assert_eq!(rank_classes_by_volume(&stats), vec![1]);
    }

    #[test]
    fn dimension_ranking() {
        let stats = RegionStats::from_sides(
            vec![vec![0.4, 0.1], vec![0.2, 0.3]],
            vec![0, 1],
            2,
            1e-12,
        )
        .unwrap();
        assert_eq!(rank_classes_by_dimension(&stats, 0).unwrap(), vec![0, 1]);
        assert_eq!(rank_classes_by_dimension(&stats, 1).unwrap(), vec![1, 0]);
        assert!(rank_classes_by_dimension(&stats, 2).is_err());
        let flat = RegionStats::from_sides(vec![vec![0.0, 0.0]; 3], vec![2, 1, 0], 3, 1e-12).unwrap();
        assert_eq!(rank_classes_by_dimension(&flat, 1).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("standard".parse::<Protocol>().unwrap(), Protocol::Standard);
        assert_eq!("few-shot:5".parse::<Protocol>().unwrap(), Protocol::FewShot(5));
        assert_eq!(
            "imbalanced:30:5".parse::<Protocol>().unwrap(),
            Protocol::Imbalanced { percent: 30.0, n: 5 }
        );
        assert!("imbalanced:130:5".parse::<Protocol>().is_err());
        assert!("bogus".parse::<Protocol>().is_err());
        let p = Protocol::Imbalanced { percent: 30.0, n: 5 };
        assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
    }

    #[test]
    fn summary_is_population_std() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }
}
