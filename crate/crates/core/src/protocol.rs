//! Evaluation protocols and reports.
//!
//! Three protocols: intra (train/validation/test split inside each
//! domain), leave-one-domain-out (train on all other domains, test on the
//! held-out one), and leave-one-domain-and-attack-out (additionally
//! excluding the test fold's attack type from training). Each fold trains
//! its own model via the full pipeline, picks the threshold at the
//! validation EER, and reports test metrics at that threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{ProtocolKind, RunConfig};
use crate::error::{FasError, Result};
use crate::metrics::{acer, apcer_bpcer, auc, eer_threshold, ScoredSample, ScoredSet};
use crate::rng::Rng;
use crate::synth::{AttackType, Liveness, MaterialSample, Sample};
use crate::train::{train_full, TrainedModel};

/// Index-based split of a sample list.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Fold {
    pub name: String,
    pub split: Split,
}

/// Per-attack-type metrics at the fold threshold.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttackBreakdown {
    pub apcer: f64,
    /// AUC of this attack type against every bona fide test sample;
    /// absent when the fold's test split lacks the type.
    pub auc: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FoldReport {
    pub name: String,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub auc: f64,
    pub eer: f64,
    pub hter: f64,
    pub threshold: f64,
    pub per_attack: BTreeMap<String, AttackBreakdown>,
    /// Mean fusion weight per channel over the test split; absent for
    /// liveness-only scoring.
    pub fusion_weights: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProtocolReport {
    pub config: RunConfig,
    pub protocol: ProtocolKind,
    pub folds: Vec<FoldReport>,
    pub summary: Summary,
}

impl ProtocolReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| FasError::Io(format!("serializing report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FasError::Integrity(format!("report parse: {e}")))
    }

    /// Fixed-column CSV: one row per fold plus mean and std rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,apcer,bpcer,acer,auc,eer,hter,threshold\n");
        let row = |name: &str, vals: [f64; 7]| {
            format!(
                "{name},{},{},{},{},{},{},{}\n",
                vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6]
            )
        };
        for f in &self.folds {
            out.push_str(&row(
                &f.name,
                [f.apcer, f.bpcer, f.acer, f.auc, f.eer, f.hter, f.threshold],
            ));
        }
        let read = |m: &BTreeMap<String, f64>, k: &str| m.get(k).copied().unwrap_or(f64::NAN);
        for (label, stats) in [("mean", &self.summary.mean), ("std", &self.summary.std)] {
            out.push_str(&row(
                label,
                [
                    read(stats, "apcer"),
                    read(stats, "bpcer"),
                    read(stats, "acer"),
                    read(stats, "auc"),
                    read(stats, "eer"),
                    read(stats, "hter"),
                    read(stats, "threshold"),
                ],
            ));
        }
        out
    }
}

fn stratified_split(
    samples: &[Sample],
    pool: &[usize],
    rng: &Rng,
    val_frac: f64,
    test_frac: f64,
) -> Result<Split> {
    // group by (domain, attack) so every stratum lands in every part
    let mut groups: BTreeMap<(usize, &'static str), Vec<usize>> = BTreeMap::new();
    for &i in pool {
        groups
            .entry((samples[i].domain, samples[i].attack.name()))
            .or_default()
            .push(i);
    }
    let mut split = Split::default();
    for ((domain, attack), mut members) in groups {
        rng.derive(domain as u64 * 131 + members.len() as u64)
            .shuffle(&mut members);
        let n = members.len();
        let n_test = if test_frac > 0.0 {
            ((n as f64 * test_frac).round() as usize).max(1)
        } else {
            0
        };
        let n_val = ((n as f64 * val_frac).round() as usize).max(1);
        if n_test + n_val >= n {
            return Err(FasError::Contract(format!(
                "stratum (domain {domain}, attack {attack}) has only {n} samples; cannot split"
            )));
        }
        split.test.extend(&members[..n_test]);
        split.val.extend(&members[n_test..n_test + n_val]);
        split.train.extend(&members[n_test + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

fn require_both_classes(samples: &[Sample], idx: &[usize], what: &str) -> Result<()> {
    let genuine = idx
        .iter()
        .any(|&i| samples[i].liveness == Liveness::Genuine);
    let spoof = idx.iter().any(|&i| samples[i].liveness == Liveness::Spoof);
    if !genuine || !spoof {
        return Err(FasError::Contract(format!(
            "{what} lacks one of the two classes"
        )));
    }
    Ok(())
}

/// Verifies that every (domain, attack) cell the protocol relies on is
/// populated; the error lists the missing cells.
fn check_coverage(samples: &[Sample], domains: &[usize], attacks: &[AttackType]) -> Result<()> {
    let mut missing = Vec::new();
    for &d in domains {
        for a in [AttackType::None].iter().chain(attacks) {
            if !samples.iter().any(|s| s.domain == d && s.attack == *a) {
                missing.push(format!("(domain {d}, {})", a.name()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(FasError::Contract(format!(
            "insufficient protocol coverage; empty cells: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

fn domains_of(samples: &[Sample]) -> Vec<usize> {
    let mut d: Vec<usize> = samples.iter().map(|s| s.domain).collect();
    d.sort_unstable();
    d.dedup();
    d
}

fn attacks_of(samples: &[Sample]) -> Vec<AttackType> {
    AttackType::ATTACKS
        .into_iter()
        .filter(|a| samples.iter().any(|s| s.attack == *a))
        .collect()
}

/// Builds the fold list for a protocol over a labeled corpus.
pub fn build_folds(
    cfg: &RunConfig,
    samples: &[Sample],
    protocol: ProtocolKind,
) -> Result<Vec<Fold>> {
    let domains = domains_of(samples);
    let attacks = attacks_of(samples);
    if attacks.is_empty() {
        return Err(FasError::Contract("corpus has no attack samples".into()));
    }
    let rng = Rng::new(cfg.training.seed).derive(0xf01d);
    let mut folds = Vec::new();
    match protocol {
        ProtocolKind::Intra => {
            check_coverage(samples, &domains, &attacks)?;
            for &d in &domains {
                let pool: Vec<usize> = (0..samples.len())
                    .filter(|&i| samples[i].domain == d)
                    .collect();
                let split = stratified_split(samples, &pool, &rng.derive(d as u64), 0.2, 0.2)?;
                require_both_classes(samples, &split.val, "intra validation split")?;
                require_both_classes(samples, &split.test, "intra test split")?;
                folds.push(Fold {
                    name: format!("intra_domain_{d}"),
                    split,
                });
            }
        }
        ProtocolKind::LeaveOneDomainOut => {
            if domains.len() < 2 {
                return Err(FasError::Contract(
                    "leave_one_domain_out needs at least 2 domains".into(),
                ));
            }
            check_coverage(samples, &domains, &attacks)?;
            for &d in &domains {
                let train_pool: Vec<usize> = (0..samples.len())
                    .filter(|&i| samples[i].domain != d)
                    .collect();
                let test: Vec<usize> = (0..samples.len())
                    .filter(|&i| samples[i].domain == d)
                    .collect();
                let mut split =
                    stratified_split(samples, &train_pool, &rng.derive(100 + d as u64), 0.2, 0.0)?;
                split.test = test;
                require_both_classes(samples, &split.val, "validation split")?;
                require_both_classes(samples, &split.test, "held-out domain")?;
                folds.push(Fold {
                    name: format!("leave_out_domain_{d}"),
                    split,
                });
            }
        }
        ProtocolKind::LeaveOneDomainAndAttackOut => {
            if domains.len() < 2 {
                return Err(FasError::Contract(
                    "leave_one_domain_and_attack_out needs at least 2 domains".into(),
                ));
            }
            check_coverage(samples, &domains, &attacks)?;
            for &d in &domains {
                for &a in &attacks {
                    let train_pool: Vec<usize> = (0..samples.len())
                        .filter(|&i| samples[i].domain != d && samples[i].attack != a)
                        .collect();
                    let test: Vec<usize> = (0..samples.len())
                        .filter(|&i| {
                            samples[i].domain == d
                                && (samples[i].attack == a
                                    || samples[i].liveness == Liveness::Genuine)
                        })
                        .collect();
                    let mut split = stratified_split(
                        samples,
                        &train_pool,
                        &rng.derive(10_000 + d as u64 * 17 + a.index_u64()),
                        0.2,
                        0.0,
                    )?;
                    split.test = test;
                    require_both_classes(samples, &split.val, "validation split")?;
                    require_both_classes(samples, &split.test, "held-out fold")?;
                    folds.push(Fold {
                        name: format!("leave_out_domain_{d}_{}", a.name()),
                        split,
                    });
                }
            }
        }
    }
    Ok(folds)
}

trait AttackIndexExt {
    fn index_u64(&self) -> u64;
}

impl AttackIndexExt for AttackType {
    fn index_u64(&self) -> u64 {
        match self {
            AttackType::None => 0,
            AttackType::Print => 1,
            AttackType::Replay => 2,
            AttackType::CutPhoto => 3,
        }
    }
}

/// Scores a set of samples with a trained model.
pub fn score_samples(
    cfg: &RunConfig,
    trained: &TrainedModel,
    samples: &[Sample],
    idx: &[usize],
) -> Result<(ScoredSet, Option<BTreeMap<String, f64>>)> {
    let mut scored = Vec::with_capacity(idx.len());
    let mut weight_sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut fused_count = 0usize;
    for &i in idx {
        let (score, fusion) = trained.score(cfg, &samples[i].image)?;
        if let Some(f) = fusion {
            for (channel, w) in ["z", "d", "r", "f"].iter().zip(f.weights) {
                *weight_sums.entry(channel.to_string()).or_insert(0.0) += w;
            }
            fused_count += 1;
        }
        scored.push(ScoredSample {
            score,
            liveness: samples[i].liveness,
            attack: samples[i].attack,
            domain: samples[i].domain,
        });
    }
    let weights = (fused_count > 0).then(|| {
        weight_sums
            .into_iter()
            .map(|(k, v)| (k, v / fused_count as f64))
            .collect()
    });
    Ok((ScoredSet::new(scored)?, weights))
}

/// Builds one fold report: threshold from the validation EER, every other
/// metric on the test split at that threshold.
pub fn fold_report(
    name: &str,
    val: &ScoredSet,
    test: &ScoredSet,
    fusion_weights: Option<BTreeMap<String, f64>>,
) -> Result<FoldReport> {
    let (threshold, _) = eer_threshold(val)?;
    let (apcer_v, bpcer_v) = apcer_bpcer(test, threshold)?;
    let acer_v = acer(apcer_v, bpcer_v)?;
    let auc_v = auc(test)?;
    let (_, eer_v) = eer_threshold(test)?;
    // HTER is the test ACER at the dev threshold, which is exactly how
    // this fold's headline metrics are reported
    let hter_v = acer_v;

    let mut per_attack = BTreeMap::new();
    for attack in AttackType::ATTACKS {
        let subset: Vec<ScoredSample> = test
            .samples
            .iter()
            .filter(|s| s.attack == attack || s.liveness == Liveness::Genuine)
            .cloned()
            .collect();
        let count = subset
            .iter()
            .filter(|s| s.liveness == Liveness::Spoof)
            .count();
        if count == 0 {
            continue;
        }
        let sub = ScoredSet::new(subset)?;
        let (a, _) = apcer_bpcer(&sub, threshold)?;
        let sub_auc = auc(&sub).ok();
        per_attack.insert(
            attack.name().to_string(),
            AttackBreakdown {
                apcer: a,
                auc: sub_auc,
                count,
            },
        );
    }
    Ok(FoldReport {
        name: name.to_string(),
        apcer: apcer_v,
        bpcer: bpcer_v,
        acer: acer_v,
        auc: auc_v,
        eer: eer_v,
        hter: hter_v,
        threshold,
        per_attack,
        fusion_weights,
    })
}

type MetricReader = fn(&FoldReport) -> f64;

fn summarize(folds: &[FoldReport]) -> Summary {
    let metrics: [(&str, MetricReader); 7] = [
        ("apcer", |f| f.apcer),
        ("bpcer", |f| f.bpcer),
        ("acer", |f| f.acer),
        ("auc", |f| f.auc),
        ("eer", |f| f.eer),
        ("hter", |f| f.hter),
        ("threshold", |f| f.threshold),
    ];
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    let n = folds.len().max(1) as f64;
    for (key, read) in metrics {
        let m: f64 = folds.iter().map(&read).sum::<f64>() / n;
        // population convention (divisor N), matching descriptive tables
        let var: f64 = folds.iter().map(|f| (read(f) - m).powi(2)).sum::<f64>() / n;
        mean.insert(key.to_string(), m);
        std.insert(key.to_string(), var.sqrt());
    }
    Summary { mean, std }
}

/// Runs a protocol end to end: per fold, trains the full pipeline on the
/// fold's training split and reports test metrics at the validation EER
/// threshold.
pub fn run_protocol(
    cfg: &RunConfig,
    samples: &[Sample],
    materials: &[MaterialSample],
    protocol: ProtocolKind,
) -> Result<ProtocolReport> {
    let folds = build_folds(cfg, samples, protocol)?;
    let mut reports = Vec::with_capacity(folds.len());
    for (fold_idx, fold) in folds.iter().enumerate() {
        let train_set: Vec<Sample> = fold
            .split
            .train
            .iter()
            .map(|&i| samples[i].clone())
            .collect();
        let fold_seed = Rng::new(cfg.training.seed)
            .derive(1000 + fold_idx as u64)
            .seed();
        let trained = train_full(cfg, &train_set, materials, fold_seed)?;
        let (val_scores, _) = score_samples(cfg, &trained, samples, &fold.split.val)?;
        let (test_scores, weights) = score_samples(cfg, &trained, samples, &fold.split.test)?;
        reports.push(fold_report(&fold.name, &val_scores, &test_scores, weights)?);
    }
    let summary = summarize(&reports);
    Ok(ProtocolReport {
        config: cfg.clone(),
        protocol,
        folds: reports,
        summary,
    })
}

/// Single-fold evaluation of an externally trained model on the corpus'
/// deterministic global split: the validation slice fixes the threshold,
/// the test slice is reported.
pub fn eval_holdout(
    cfg: &RunConfig,
    trained: &TrainedModel,
    samples: &[Sample],
) -> Result<ProtocolReport> {
    let split = global_split(cfg, samples)?;
    let (val_scores, _) = score_samples(cfg, trained, samples, &split.val)?;
    let (test_scores, weights) = score_samples(cfg, trained, samples, &split.test)?;
    let fold = fold_report("holdout", &val_scores, &test_scores, weights)?;
    let summary = summarize(std::slice::from_ref(&fold));
    Ok(ProtocolReport {
        config: cfg.clone(),
        protocol: cfg.protocol.0,
        folds: vec![fold],
        summary,
    })
}

/// Deterministic corpus-wide train/validation/test split shared by the
/// CLI training and evaluation commands.
pub fn global_split(cfg: &RunConfig, samples: &[Sample]) -> Result<Split> {
    let pool: Vec<usize> = (0..samples.len()).collect();
    let rng = Rng::new(cfg.training.seed).derive(0x5317);
    let split = stratified_split(samples, &pool, &rng, 0.2, 0.2)?;
    require_both_classes(samples, &split.val, "global validation split")?;
    require_both_classes(samples, &split.test, "global test split")?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_materials, generate_samples, DataConfig};

    fn corpus(domains: usize, identities: usize, per_cell: usize) -> (RunConfig, Vec<Sample>) {
        let mut cfg = RunConfig {
            data: DataConfig {
                domains,
                identities,
                samples_per_cell: per_cell,
                material_patches_per_class: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.model.identity_count = identities;
        let samples = generate_samples(&cfg.data, 21).unwrap();
        (cfg, samples)
    }

    #[test]
    fn leave_one_domain_out_yields_one_fold_per_domain() {
        let (cfg, samples) = corpus(4, 4, 2);
        let folds = build_folds(&cfg, &samples, ProtocolKind::LeaveOneDomainOut).unwrap();
        assert_eq!(folds.len(), 4);
        for (d, fold) in folds.iter().enumerate() {
            assert!(fold.split.test.iter().all(|&i| samples[i].domain == d));
            assert!(fold.split.train.iter().all(|&i| samples[i].domain != d));
            assert!(fold.split.val.iter().all(|&i| samples[i].domain != d));
        }
    }

    #[test]
    fn leave_one_domain_and_attack_out_excludes_both() {
        let (cfg, samples) = corpus(2, 4, 2);
        let folds = build_folds(&cfg, &samples, ProtocolKind::LeaveOneDomainAndAttackOut).unwrap();
        assert_eq!(folds.len(), 2 * 3);
        for fold in &folds {
            // parse held-out domain and attack from the fold name
            let rest = fold.name.strip_prefix("leave_out_domain_").unwrap();
            let (d_str, a_str) = rest.split_once('_').unwrap();
            let d: usize = d_str.parse().unwrap();
            for &i in fold.split.train.iter().chain(&fold.split.val) {
                assert_ne!(samples[i].domain, d, "{}", fold.name);
                assert_ne!(samples[i].attack.name(), a_str, "{}", fold.name);
            }
            for &i in &fold.split.test {
                assert_eq!(samples[i].domain, d);
                assert!(
                    samples[i].attack.name() == a_str || samples[i].liveness == Liveness::Genuine
                );
            }
        }
    }

    #[test]
    fn intra_folds_split_within_each_domain() {
        let (cfg, samples) = corpus(2, 4, 3);
        let folds = build_folds(&cfg, &samples, ProtocolKind::Intra).unwrap();
        assert_eq!(folds.len(), 2);
        for fold in &folds {
            let all: Vec<usize> = fold
                .split
                .train
                .iter()
                .chain(&fold.split.val)
                .chain(&fold.split.test)
                .copied()
                .collect();
            let domain = samples[all[0]].domain;
            assert!(all.iter().all(|&i| samples[i].domain == domain));
            // the three parts partition the pool
            let mut sorted = all.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), all.len());
        }
    }

    #[test]
    fn missing_cells_are_listed() {
        let (cfg, mut samples) = corpus(2, 4, 2);
        samples.retain(|s| !(s.domain == 1 && s.attack == AttackType::Replay));
        let err = build_folds(&cfg, &samples, ProtocolKind::LeaveOneDomainOut).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("domain 1") && msg.contains("replay"), "{msg}");
    }

    #[test]
    fn single_domain_rejected_for_cross_domain_protocols() {
        let (cfg, samples) = corpus(1, 4, 2);
        assert!(build_folds(&cfg, &samples, ProtocolKind::LeaveOneDomainOut).is_err());
    }

    #[test]
    fn fold_building_is_deterministic() {
        let (cfg, samples) = corpus(3, 4, 2);
        let a = build_folds(&cfg, &samples, ProtocolKind::LeaveOneDomainOut).unwrap();
        let b = build_folds(&cfg, &samples, ProtocolKind::LeaveOneDomainOut).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.split.train, y.split.train);
            assert_eq!(x.split.val, y.split.val);
            assert_eq!(x.split.test, y.split.test);
        }
    }

    #[test]
    fn csv_has_fold_and_summary_rows() {
        let fold = FoldReport {
            name: "f0".into(),
            apcer: 1.0,
            bpcer: 2.0,
            acer: 1.5,
            auc: 90.0,
            eer: 5.0,
            hter: 1.5,
            threshold: 0.5,
            per_attack: BTreeMap::new(),
            fusion_weights: None,
        };
        let report = ProtocolReport {
            config: RunConfig::default(),
            protocol: ProtocolKind::Intra,
            folds: vec![fold.clone(), fold],
            summary: summarize(&[]),
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fold,apcer,bpcer,acer,auc,eer,hter,threshold");
        assert_eq!(lines.len(), 1 + 2 + 2);
        assert!(lines[3].starts_with("mean,"));
        assert!(lines[4].starts_with("std,"));
    }

    #[test]
    fn summary_uses_population_std() {
        let mk = |acer: f64| FoldReport {
            name: "f".into(),
            apcer: 0.0,
            bpcer: 0.0,
            acer,
            auc: 0.0,
            eer: 0.0,
            hter: 0.0,
            threshold: 0.0,
            per_attack: BTreeMap::new(),
            fusion_weights: None,
        };
        let s = summarize(&[mk(1.0), mk(3.0)]);
        assert_eq!(s.mean["acer"], 2.0);
        // population std with divisor N: sqrt(((1-2)^2 + (3-2)^2)/2) = 1
        assert_eq!(s.std["acer"], 1.0);
    }

    #[test]
    fn report_acer_always_mean_of_apcer_bpcer() {
        let (cfg, samples) = corpus(2, 4, 2);
        let mut small = cfg.clone();
        small.training.epochs = 1;
        small.training.batch_size = 8;
        small.training.k_runs = 2;
        small.uncertainty.stage2.epochs = 1;
        let materials = generate_materials(&small.data, 3).unwrap();
        let report = run_protocol(
            &small,
            &samples,
            &materials,
            ProtocolKind::LeaveOneDomainOut,
        )
        .unwrap();
        assert_eq!(report.folds.len(), 2);
        for f in &report.folds {
            assert_eq!(f.acer, 0.5 * (f.apcer + f.bpcer));
            assert!((0.0..=100.0).contains(&f.auc));
            let w = f.fusion_weights.as_ref().unwrap();
            assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
