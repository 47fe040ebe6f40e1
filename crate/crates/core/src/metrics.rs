//! Biometric error metrics over scored sample sets.
//!
//! Boundary convention, fixed here once: a sample with spoof score >= tau
//! is classified as an attack. APCER is the percentage of attacks
//! classified bona fide, BPCER the percentage of bona fide samples
//! classified attack.

use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::synth::{AttackType, Liveness};

/// One scored evaluation sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub liveness: Liveness,
    pub attack: AttackType,
    pub domain: usize,
}

/// Non-empty collection of scored samples.
#[derive(Debug, Clone, Default)]
pub struct ScoredSet {
    pub samples: Vec<ScoredSample>,
}

impl ScoredSet {
    pub fn new(samples: Vec<ScoredSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(FasError::Contract("scored set must be non-empty".into()));
        }
        if samples.iter().any(|s| !s.score.is_finite()) {
            return Err(FasError::Numeric("scores must be finite".into()));
        }
        Ok(ScoredSet { samples })
    }

    fn split_counts(&self) -> (usize, usize) {
        let attacks = self
            .samples
            .iter()
            .filter(|s| s.liveness == Liveness::Spoof)
            .count();
        (attacks, self.samples.len() - attacks)
    }

    fn require_both_classes(&self, what: &str) -> Result<()> {
        let (attacks, bona_fide) = self.split_counts();
        if attacks == 0 || bona_fide == 0 {
            return Err(FasError::Contract(format!(
                "{what} needs both classes: {attacks} attacks, {bona_fide} bona fide"
            )));
        }
        Ok(())
    }
}

/// Attack / bona-fide classification error rates (%) at a threshold.
pub fn apcer_bpcer(set: &ScoredSet, tau: f64) -> Result<(f64, f64)> {
    set.require_both_classes("apcer_bpcer")?;
    let mut attacks = 0usize;
    let mut attacks_accepted = 0usize;
    let mut bona_fide = 0usize;
    let mut bona_fide_rejected = 0usize;
    for s in &set.samples {
        match s.liveness {
            Liveness::Spoof => {
                attacks += 1;
                if s.score < tau {
                    attacks_accepted += 1;
                }
            }
            Liveness::Genuine => {
                bona_fide += 1;
                if s.score >= tau {
                    bona_fide_rejected += 1;
                }
            }
        }
    }
    Ok((
        100.0 * attacks_accepted as f64 / attacks as f64,
        100.0 * bona_fide_rejected as f64 / bona_fide as f64,
    ))
}

/// ACER: the arithmetic mean of APCER and BPCER.
pub fn acer(apcer: f64, bpcer: f64) -> Result<f64> {
    for v in [apcer, bpcer] {
        if !(0.0..=100.0).contains(&v) {
            return Err(FasError::Contract(format!("rate {v} outside [0, 100]")));
        }
    }
    Ok(0.5 * (apcer + bpcer))
}

/// Area under the ROC curve (%): the probability that a random attack
/// outscores a random bona fide sample, ties counted one half
/// (Mann-Whitney). Computed with average ranks, exact under ties.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    set.require_both_classes("auc")?;
    let n = set.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        set.samples[a]
            .score
            .partial_cmp(&set.samples[b].score)
            .expect("finite scores")
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.samples[order[j + 1]].score == set.samples[order[i]].score {
            j += 1;
        }
        // 1-based average rank of the tied block [i, j]
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let (attacks, bona_fide) = set.split_counts();
    let rank_sum: f64 = set
        .samples
        .iter()
        .zip(&ranks)
        .filter(|(s, _)| s.liveness == Liveness::Spoof)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (attacks * (attacks + 1)) as f64 / 2.0;
    Ok(100.0 * u / (attacks as f64 * bona_fide as f64))
}

/// Candidate thresholds: one sentinel below every score, the midpoints
/// between adjacent distinct scores, one sentinel above every score. The
/// sentinels induce the same all-attack / all-bona-fide classifications
/// the infinite endpoints would, while staying finite for reports.
fn threshold_candidates(set: &ScoredSet) -> Vec<f64> {
    let mut scores: Vec<f64> = set.samples.iter().map(|s| s.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    scores.dedup();
    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(scores[0] - 1.0);
    for pair in scores.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(scores[scores.len() - 1] + 1.0);
    candidates
}

/// Threshold minimizing |APCER - BPCER| over the candidate scan, ties
/// resolved toward the smallest threshold, and the EER at that threshold.
pub fn eer_threshold(set: &ScoredSet) -> Result<(f64, f64)> {
    set.require_both_classes("eer_threshold")?;
    let mut best: Option<(f64, f64, f64)> = None; // (tau, gap, eer)
    for tau in threshold_candidates(set) {
        let (apcer, bpcer) = apcer_bpcer(set, tau)?;
        let gap = (apcer - bpcer).abs();
        let eer = 0.5 * (apcer + bpcer);
        let better = match &best {
            None => true,
            Some((_, best_gap, _)) => gap < *best_gap,
        };
        if better {
            best = Some((tau, gap, eer));
        }
    }
    let (tau, _, eer) = best.expect("candidates are non-empty");
    Ok((tau, eer))
}

/// HTER: the EER threshold is fixed on the development set, then the test
/// set's ACER at that threshold is reported.
pub fn hter(dev: &ScoredSet, test: &ScoredSet) -> Result<f64> {
    let (tau, _) = eer_threshold(dev)?;
    let (apcer, bpcer) = apcer_bpcer(test, tau)?;
    acer(apcer, bpcer)
}
