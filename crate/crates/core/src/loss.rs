//! Stage-1 training objectives: identity pretext cross-entropy, liveness
//! binary cross-entropy on the two-hyperplane softmax, L1 map
//! reconstruction for depth and reflection, the dual-branch material
//! cross-entropy, attribute-assisted triplet losses with in-batch hard
//! mining, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::synth::Liveness;
use crate::tensor::Tensor;

/// Weights of the combined stage-1 objective and the triplet margins.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_d: f64,
    pub lambda_r: f64,
    pub lambda_m: f64,
    pub lambda_t: f64,
    pub lambda_rec: f64,
    pub m1: f64,
    pub m2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_v: 1.0,
            lambda_d: 1.0,
            lambda_r: 1.0,
            lambda_m: 0.1,
            lambda_t: 0.1,
            lambda_rec: 1.0,
            m1: 0.3,
            m2: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_v,
            self.lambda_d,
            self.lambda_r,
            self.lambda_m,
            self.lambda_t,
            self.lambda_rec,
            self.m1,
            self.m2,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FasError::Config(
                "loss weights and margins must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Identity pretext: softmax cross-entropy -log p_y over the identity
/// logits.
pub fn recognition_loss(id_logits: &Tensor, y: usize) -> Result<Tensor> {
    if id_logits.shape().len() != 1 || y >= id_logits.numel() {
        return Err(FasError::Contract(format!(
            "identity label {y} out of range for {} logits",
            id_logits.numel()
        )));
    }
    Ok(id_logits.log_softmax()?.index(y)?.neg())
}

/// Liveness binary cross-entropy. Logit 0 belongs to the spoof
/// hyperplane, so the spoof probability is softmax(logits)[0] and the
/// loss reduces to -log_softmax(logits)[label index].
pub fn liveness_loss(liveness_logits: &Tensor, label: Liveness) -> Result<Tensor> {
    if liveness_logits.shape() != [2] {
        return Err(FasError::Dim {
            op: "liveness_loss",
            detail: format!("expected [2] logits, got {:?}", liveness_logits.shape()),
        });
    }
    let idx = match label {
        Liveness::Spoof => 0,
        Liveness::Genuine => 1,
    };
    Ok(liveness_logits.log_softmax()?.index(idx)?.neg())
}

/// Spoof probability implied by the liveness logits.
pub fn spoof_probability(liveness_logits: &Tensor) -> Result<f64> {
    Ok(liveness_logits.softmax()?.data()[0])
}

fn map_l1(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(FasError::Dim {
            op,
            detail: format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            ),
        });
    }
    // mean- rather than sum-reduced so weights stay resolution-independent
    Ok(pred.sub(gt)?.abs().mean())
}

/// Mean absolute error over depth map pixels. Spoof samples supply the
/// all-zero ground-truth map.
pub fn depth_loss(d_pred: &Tensor, d_gt: &Tensor) -> Result<Tensor> {
    map_l1("depth_loss", d_pred, d_gt)
}

/// Mean absolute error over reflection map pixels. Genuine samples supply
/// the all-zero ground-truth map.
pub fn reflection_loss(r_pred: &Tensor, r_gt: &Tensor) -> Result<Tensor> {
    map_l1("reflection_loss", r_pred, r_gt)
}

/// Combined material objective: cross-entropy of the 23-way general
/// branch plus cross-entropy of the 3-way spoof-medium branch, over
/// whichever branches are present.
pub fn material_loss(
    general: Option<(&Tensor, usize)>,
    spoof: Option<(&Tensor, usize)>,
) -> Result<Tensor> {
    if general.is_none() && spoof.is_none() {
        return Err(FasError::Contract(
            "material_loss requires at least one branch".into(),
        ));
    }
    let mut total: Option<Tensor> = None;
    for (logits, label) in [general, spoof].into_iter().flatten() {
        if label >= logits.numel() {
            return Err(FasError::Contract(format!(
                "material label {label} out of range for {} logits",
                logits.numel()
            )));
        }
        let ce = logits.log_softmax()?.index(label)?.neg();
        total = Some(match total {
            Some(t) => t.add(&ce)?,
            None => ce,
        });
    }
    Ok(total.expect("at least one branch"))
}

fn triplet_hinge(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
) -> Result<Tensor> {
    let pos = anchor.sq_dist(positive)?;
    let neg = anchor.sq_dist(negative)?;
    Ok(pos.sub(&neg)?.add_scalar(margin).relu())
}

/// Identity triplet: hinge(||a-p||^2 - ||a-n||^2 + m1).
pub fn triplet_identity_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    m1: f64,
) -> Result<Tensor> {
    triplet_hinge(anchor, positive, negative, m1)
}

/// Attribute triplet: hinge(||a-p||^2 - ||a-n||^2 + m2).
pub fn triplet_attribute_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    m2: f64,
) -> Result<Tensor> {
    triplet_hinge(anchor, positive, negative, m2)
}

/// How triples are formed from labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// Positives share the anchor's identity (resp. attribute value),
    /// negatives differ, exactly as the hinge objectives are written.
    Literal,
    /// Positives share the anchor's liveness label while differing in
    /// identity (resp. attribute value); negatives differ in liveness.
    Disentangle,
}

/// One batch member offered to the miner.
#[derive(Debug, Clone)]
pub struct MiningSample<'a> {
    pub feature: &'a [f64],
    pub identity: usize,
    pub attributes: &'a [usize],
    pub liveness: Liveness,
}

/// Label snapshot plus the hard triples mined for both triplet losses.
#[derive(Debug, Clone, Default)]
pub struct TripletBatchIndex {
    pub identities: Vec<usize>,
    pub attributes: Vec<Vec<usize>>,
    pub liveness: Vec<Liveness>,
    pub identity_triples: Vec<(usize, usize, usize)>,
    pub attribute_triples: Vec<(usize, usize, usize)>,
}

impl TripletBatchIndex {
    pub fn is_empty(&self) -> bool {
        self.identity_triples.is_empty() && self.attribute_triples.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per anchor: the valid positive at maximal distance and the valid
/// negative at minimal distance; ties resolved toward the lowest sample
/// index by the strict comparisons below.
fn hard_triple<P, N>(
    batch: &[MiningSample],
    anchor: usize,
    valid_pos: P,
    valid_neg: N,
) -> Option<(usize, usize, usize)>
where
    P: Fn(&MiningSample, &MiningSample) -> bool,
    N: Fn(&MiningSample, &MiningSample) -> bool,
{
    let a = &batch[anchor];
    let mut best_pos: Option<(usize, f64)> = None;
    let mut best_neg: Option<(usize, f64)> = None;
    for (j, s) in batch.iter().enumerate() {
        if j == anchor {
            continue;
        }
        let d = sq_dist(a.feature, s.feature);
        if valid_pos(a, s) && best_pos.is_none_or(|(_, bd)| d > bd) {
            best_pos = Some((j, d));
        }
        if valid_neg(a, s) && best_neg.is_none_or(|(_, bd)| d < bd) {
            best_neg = Some((j, d));
        }
    }
    match (best_pos, best_neg) {
        (Some((p, _)), Some((n, _))) => Some((anchor, p, n)),
        _ => None,
    }
}

/// Mines hard triples for the identity and attribute losses. Batches with
/// no valid triple yield an empty index; the losses then contribute zero.
pub fn mine_triplets(batch: &[MiningSample], mode: MiningMode) -> TripletBatchIndex {
    let mut index = TripletBatchIndex {
        identities: batch.iter().map(|s| s.identity).collect(),
        attributes: batch.iter().map(|s| s.attributes.to_vec()).collect(),
        liveness: batch.iter().map(|s| s.liveness).collect(),
        ..Default::default()
    };
    let attr_dims = batch.iter().map(|s| s.attributes.len()).min().unwrap_or(0);
    for anchor in 0..batch.len() {
        let id_triple = match mode {
            MiningMode::Literal => hard_triple(
                batch,
                anchor,
                |a, s| s.identity == a.identity,
                |a, s| s.identity != a.identity,
            ),
            MiningMode::Disentangle => hard_triple(
                batch,
                anchor,
                |a, s| s.liveness == a.liveness && s.identity != a.identity,
                |a, s| s.liveness != a.liveness,
            ),
        };
        index.identity_triples.extend(id_triple);
        for k in 0..attr_dims {
            let attr_triple = match mode {
                MiningMode::Literal => hard_triple(
                    batch,
                    anchor,
                    |a, s| s.attributes[k] == a.attributes[k],
                    |a, s| s.attributes[k] != a.attributes[k],
                ),
                MiningMode::Disentangle => hard_triple(
                    batch,
                    anchor,
                    |a, s| s.liveness == a.liveness && s.attributes[k] != a.attributes[k],
                    |a, s| s.liveness != a.liveness,
                ),
            };
            index.attribute_triples.extend(attr_triple);
        }
    }
    index
}

/// Mean triplet hinge over mined triples; `None` when no triple exists.
pub fn mean_triplet_loss(
    features: &[Tensor],
    triples: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Option<Tensor>> {
    if triples.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Tensor> = None;
    for &(a, p, n) in triples {
        let hinge = triplet_hinge(&features[a], &features[p], &features[n], margin)?;
        total = Some(match total {
            Some(t) => t.add(&hinge)?,
            None => hinge,
        });
    }
    Ok(Some(
        total
            .expect("non-empty triples")
            .mul_scalar(1.0 / triples.len() as f64),
    ))
}

/// Scalar components entering the combined stage-1 objective.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub liveness: Tensor,
    pub depth: Tensor,
    pub reflection: Tensor,
    pub material: Tensor,
    pub triplet_identity: Tensor,
    pub triplet_attribute: Tensor,
    pub recognition: Tensor,
}

impl LossComponents {
    pub fn zeros() -> Self {
        LossComponents {
            liveness: Tensor::scalar(0.0),
            depth: Tensor::scalar(0.0),
            reflection: Tensor::scalar(0.0),
            material: Tensor::scalar(0.0),
            triplet_identity: Tensor::scalar(0.0),
            triplet_attribute: Tensor::scalar(0.0),
            recognition: Tensor::scalar(0.0),
        }
    }
}

/// Weighted stage-1 total:
/// lv*Lv + ld*Ld + lr*Lr + lm*Lm + lt*(Ltid + Lta) + lrec*Lrec.
pub fn total_stage1_loss(components: &LossComponents, weights: &LossWeights) -> Result<Tensor> {
    let named = [
        ("liveness", &components.liveness, weights.lambda_v),
        ("depth", &components.depth, weights.lambda_d),
        ("reflection", &components.reflection, weights.lambda_r),
        ("material", &components.material, weights.lambda_m),
        (
            "triplet_identity",
            &components.triplet_identity,
            weights.lambda_t,
        ),
        (
            "triplet_attribute",
            &components.triplet_attribute,
            weights.lambda_t,
        ),
        ("recognition", &components.recognition, weights.lambda_rec),
    ];
    let mut total = Tensor::scalar(0.0);
    for (name, tensor, weight) in named {
        if tensor.numel() != 1 {
            return Err(FasError::Contract(format!(
                "loss component {name} is not a scalar"
            )));
        }
        if !tensor.value().is_finite() {
            return Err(FasError::Numeric(format!(
                "loss component {name} is not finite"
            )));
        }
        total = total.add(&tensor.mul_scalar(weight))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::finite_diff_check;

    /// Direct-formula cross-entropy oracle.
    fn ce_oracle(logits: &[f64], y: usize) -> f64 {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        -((logits[y] - max).exp() / sum).ln()
    }

    #[test]
    fn recognition_uniform_logits_give_ln_n() {
        let logits = Tensor::from_vec(&[8], vec![0.4; 8]).unwrap();
        for y in 0..8 {
            let loss = recognition_loss(&logits, y).unwrap();
            assert!((loss.value() - 8.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn recognition_saturated_correct_logit_vanishes() {
        let mut v = vec![0.0; 6];
        v[2] = 30.0;
        let logits = Tensor::from_vec(&[6], v).unwrap();
        assert!(recognition_loss(&logits, 2).unwrap().value() < 1e-12);
    }

    #[test]
    fn recognition_matches_direct_formula() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let logits = rng.normal_tensor(&[9]).unwrap();
            let y = rng.below(9);
            let got = recognition_loss(&logits, y).unwrap().value();
            assert!((got - ce_oracle(logits.data(), y)).abs() < 1e-12);
        }
    }

    #[test]
    fn recognition_label_out_of_range_is_contract_error() {
        let logits = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        assert!(matches!(
            recognition_loss(&logits, 4),
            Err(FasError::Contract(_))
        ));
    }

    #[test]
    fn liveness_equal_logits_give_ln_two() {
        let logits = Tensor::from_vec(&[2], vec![1.3, 1.3]).unwrap();
        for label in [Liveness::Genuine, Liveness::Spoof] {
            let loss = liveness_loss(&logits, label).unwrap();
            assert!((loss.value() - 2.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn liveness_saturated_spoof_logit_vanishes() {
        let logits = Tensor::from_vec(&[2], vec![30.0, 0.0]).unwrap();
        assert!(liveness_loss(&logits, Liveness::Spoof).unwrap().value() < 1e-12);
        assert!(spoof_probability(&logits).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn liveness_gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        for _ in 0..25 {
            let x0 = rng.normal_tensor(&[2]).unwrap();
            let err = finite_diff_check(|t| liveness_loss(t, Liveness::Genuine), &x0, 1e-3, None)
                .unwrap();
            assert!(err < 1e-4, "max rel err {err}");
        }
    }

    #[test]
    fn depth_loss_zero_on_match_and_offset_exact() {
        let mut rng = Rng::new(3);
        let gt = Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|_| rng.uniform_in(0.1, 0.6)).collect(),
        )
        .unwrap();
        assert_eq!(depth_loss(&gt, &gt).unwrap().value(), 0.0);
        let pred = gt.add_scalar(0.25);
        assert!((depth_loss(&pred, &gt).unwrap().value() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_for_spoof_is_mean_prediction() {
        let mut rng = Rng::new(4);
        let pred = Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|_| rng.uniform_in(0.0, 1.0)).collect(),
        )
        .unwrap();
        let zero_gt = Tensor::zeros(&[1, 4, 4]);
        let want = pred.data().iter().sum::<f64>() / 16.0;
        assert!((depth_loss(&pred, &zero_gt).unwrap().value() - want).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[1, 4, 4]);
        let b = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(depth_loss(&a, &b), Err(FasError::Dim { .. })));
    }

    #[test]
    fn reflection_loss_for_genuine_is_mean_prediction() {
        let pred = Tensor::from_vec(&[1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let zero_gt = Tensor::zeros(&[1, 2, 2]);
        assert!((reflection_loss(&pred, &zero_gt).unwrap().value() - 0.5).abs() < 1e-12);
        assert_eq!(reflection_loss(&zero_gt, &zero_gt).unwrap().value(), 0.0);
    }

    #[test]
    fn reflection_gradient_matches_finite_differences_away_from_ties() {
        let mut rng = Rng::new(5);
        for _ in 0..25 {
            // keep |pred - gt| > 10h everywhere
            let gt_data: Vec<f64> = (0..16).map(|_| rng.uniform_in(0.0, 0.4)).collect();
            let pred_data: Vec<f64> = gt_data
                .iter()
                .map(|v| v + rng.uniform_in(0.05, 0.5))
                .collect();
            let gt = Tensor::from_vec(&[1, 4, 4], gt_data).unwrap();
            let pred = Tensor::from_vec(&[1, 4, 4], pred_data).unwrap();
            let err = finite_diff_check(|t| reflection_loss(t, &gt), &pred, 1e-3, None).unwrap();
            assert!(err < 1e-4, "max rel err {err}");
        }
    }

    #[test]
    fn material_uniform_branches_hit_ln_class_counts() {
        let g = Tensor::from_vec(&[23], vec![0.0; 23]).unwrap();
        let s = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        let lg = material_loss(Some((&g, 7)), None).unwrap().value();
        assert!((lg - 23.0f64.ln()).abs() < 1e-12);
        let ls = material_loss(None, Some((&s, 1))).unwrap().value();
        assert!((ls - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn material_both_branches_sum_direct_cross_entropies() {
        let mut rng = Rng::new(6);
        for _ in 0..30 {
            let g = rng.normal_tensor(&[23]).unwrap();
            let s = rng.normal_tensor(&[3]).unwrap();
            let yg = rng.below(23);
            let ys = rng.below(3);
            let got = material_loss(Some((&g, yg)), Some((&s, ys)))
                .unwrap()
                .value();
            let want = ce_oracle(g.data(), yg) + ce_oracle(s.data(), ys);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn material_without_branches_is_contract_error() {
        assert!(matches!(
            material_loss(None, None),
            Err(FasError::Contract(_))
        ));
    }

    #[test]
    fn triplet_satisfied_margin_is_zero() {
        let a = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let n = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap(); // ||a-n||^2 = 1 >= m
        let loss = triplet_identity_loss(&a, &a, &n, 0.3).unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn triplet_tie_between_pos_and_neg_gives_margin() {
        let a = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let p = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let n = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let loss = triplet_attribute_loss(&a, &p, &n, 0.3).unwrap();
        assert!((loss.value() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn triplet_matches_direct_hinge_formula() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let a = rng.normal_tensor(&[5]).unwrap();
            let p = rng.normal_tensor(&[5]).unwrap();
            let n = rng.normal_tensor(&[5]).unwrap();
            let m = rng.uniform_in(0.0, 1.0);
            let got = triplet_identity_loss(&a, &p, &n, m).unwrap().value();
            let dp: f64 = a
                .data()
                .iter()
                .zip(p.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let dn: f64 = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let want = (dp - dn + m).max(0.0);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn triplet_gradient_matches_finite_differences_away_from_hinge() {
        let mut rng = Rng::new(8);
        let mut checked = 0;
        while checked < 25 {
            let a0 = rng.normal_tensor(&[4]).unwrap();
            let p = rng.normal_tensor(&[4]).unwrap();
            let n = rng.normal_tensor(&[4]).unwrap();
            let dp: f64 = a0
                .data()
                .iter()
                .zip(p.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let dn: f64 = a0
                .data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if (dp - dn + 0.3).abs() < 0.05 {
                continue; // too close to the hinge kink for h = 1e-3
            }
            let err = finite_diff_check(|a| triplet_identity_loss(a, &p, &n, 0.3), &a0, 1e-3, None)
                .unwrap();
            assert!(err < 1e-4, "max rel err {err}");
            checked += 1;
        }
    }

    fn mining_batch<'a>(
        features: &'a [Vec<f64>],
        identities: &[usize],
        attributes: &'a [Vec<usize>],
        liveness: &[Liveness],
    ) -> Vec<MiningSample<'a>> {
        (0..features.len())
            .map(|i| MiningSample {
                feature: &features[i],
                identity: identities[i],
                attributes: &attributes[i],
                liveness: liveness[i],
            })
            .collect()
    }

    #[test]
    fn single_identity_batch_yields_no_identity_triples() {
        let features = vec![vec![0.0], vec![1.0], vec![2.0]];
        let attrs = vec![vec![0], vec![0], vec![0]];
        let live = vec![Liveness::Genuine; 3];
        let batch = mining_batch(&features, &[5, 5, 5], &attrs, &live);
        let index = mine_triplets(&batch, MiningMode::Literal);
        assert!(index.identity_triples.is_empty());
        assert!(index.attribute_triples.is_empty()); // single attribute value too
    }

    /// Exhaustive enumeration oracle for literal hard mining on a
    /// 2 identities x 2 samples batch.
    #[test]
    fn literal_mining_matches_exhaustive_enumeration() {
        let features = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.2, 0.9],
            vec![0.1, 0.4],
        ];
        let identities = [0, 0, 1, 1];
        let attrs = vec![vec![0], vec![1], vec![0], vec![1]];
        let live = [
            Liveness::Genuine,
            Liveness::Genuine,
            Liveness::Spoof,
            Liveness::Spoof,
        ];
        let batch = mining_batch(&features, &identities, &attrs, &live);
        let index = mine_triplets(&batch, MiningMode::Literal);

        let d = |i: usize, j: usize| sq_dist(&features[i], &features[j]);
        let mut expect = Vec::new();
        for a in 0..4 {
            let mut best_p: Option<(usize, f64)> = None;
            let mut best_n: Option<(usize, f64)> = None;
            for j in 0..4 {
                if j == a {
                    continue;
                }
                if identities[j] == identities[a] && best_p.is_none_or(|(_, bd)| d(a, j) > bd) {
                    best_p = Some((j, d(a, j)));
                }
                if identities[j] != identities[a] && best_n.is_none_or(|(_, bd)| d(a, j) < bd) {
                    best_n = Some((j, d(a, j)));
                }
            }
            expect.push((a, best_p.unwrap().0, best_n.unwrap().0));
        }
        assert_eq!(index.identity_triples, expect);
    }

    #[test]
    fn identical_features_break_ties_toward_lowest_index() {
        let features = vec![vec![0.5; 2]; 4];
        let identities = [0, 1, 0, 1];
        let attrs = vec![vec![0], vec![1], vec![1], vec![0]];
        let live = [Liveness::Genuine; 4];
        let batch = mining_batch(&features, &identities, &attrs, &live);
        let index = mine_triplets(&batch, MiningMode::Literal);
        // anchor 0: positives {2}, negatives {1, 3} -> tie resolved to 1
        assert!(index.identity_triples.contains(&(0, 2, 1)));
        // anchor 1: positives {3}, negatives {0, 2} -> tie resolved to 0
        assert!(index.identity_triples.contains(&(1, 3, 0)));
        for &(a, p, n) in &index.identity_triples {
            assert_eq!(identities[a], identities[p]);
            assert_ne!(identities[a], identities[n]);
        }
    }

    #[test]
    fn disentangle_mode_uses_liveness_labels() {
        let features = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let identities = [0, 1, 0, 1];
        let attrs = vec![vec![0], vec![1], vec![1], vec![0]];
        let live = [
            Liveness::Genuine,
            Liveness::Genuine,
            Liveness::Spoof,
            Liveness::Spoof,
        ];
        let batch = mining_batch(&features, &identities, &attrs, &live);
        let index = mine_triplets(&batch, MiningMode::Disentangle);
        for &(a, p, n) in &index.identity_triples {
            assert_eq!(live[a], live[p]);
            assert_ne!(identities[a], identities[p]);
            assert_ne!(live[a], live[n]);
        }
        assert!(!index.identity_triples.is_empty());
    }

    /// Exhaustive brute-force hard-triple oracle over random batches up
    /// to 16 samples, literal mode.
    #[test]
    fn literal_mining_matches_oracle_on_batches_up_to_sixteen() {
        let mut rng = Rng::new(77);
        for _ in 0..60 {
            let n = 4 + rng.below(13); // 4..=16
            let features: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.normal(), rng.normal(), rng.normal()])
                .collect();
            let identities: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
            let attrs: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.below(2), rng.below(3)]).collect();
            let live: Vec<Liveness> = (0..n)
                .map(|_| {
                    if rng.below(2) == 0 {
                        Liveness::Genuine
                    } else {
                        Liveness::Spoof
                    }
                })
                .collect();
            let batch = mining_batch(&features, &identities, &attrs, &live);
            let index = mine_triplets(&batch, MiningMode::Literal);

            let d = |i: usize, j: usize| sq_dist(&features[i], &features[j]);
            let mut expect_id = Vec::new();
            let mut expect_attr = Vec::new();
            for a in 0..n {
                let mut best_p: Option<(usize, f64)> = None;
                let mut best_n: Option<(usize, f64)> = None;
                for j in 0..n {
                    if j == a {
                        continue;
                    }
                    if identities[j] == identities[a] && best_p.is_none_or(|(_, bd)| d(a, j) > bd) {
                        best_p = Some((j, d(a, j)));
                    }
                    if identities[j] != identities[a] && best_n.is_none_or(|(_, bd)| d(a, j) < bd) {
                        best_n = Some((j, d(a, j)));
                    }
                }
                if let (Some((p, _)), Some((neg, _))) = (best_p, best_n) {
                    expect_id.push((a, p, neg));
                }
                #[allow(clippy::needless_range_loop)] // k indexes parallel label arrays
                for k in 0..2 {
                    let mut best_p: Option<(usize, f64)> = None;
                    let mut best_n: Option<(usize, f64)> = None;
                    for j in 0..n {
                        if j == a {
                            continue;
                        }
                        if attrs[j][k] == attrs[a][k] && best_p.is_none_or(|(_, bd)| d(a, j) > bd) {
                            best_p = Some((j, d(a, j)));
                        }
                        if attrs[j][k] != attrs[a][k] && best_n.is_none_or(|(_, bd)| d(a, j) < bd) {
                            best_n = Some((j, d(a, j)));
                        }
                    }
                    if let (Some((p, _)), Some((neg, _))) = (best_p, best_n) {
                        expect_attr.push((a, p, neg));
                    }
                }
            }
            assert_eq!(index.identity_triples, expect_id);
            assert_eq!(index.attribute_triples, expect_attr);
        }
    }

    #[test]
    fn total_loss_is_zero_for_zero_components() {
        let total = total_stage1_loss(&LossComponents::zeros(), &LossWeights::default()).unwrap();
        assert_eq!(total.value(), 0.0);
    }

    #[test]
    fn total_loss_unit_components_match_hand_sum() {
        // 1 + 1 + 1 + 0.1 + 0.1 * (1 + 1) = 3.3 with the recognition
        // term switched off
        let mut components = LossComponents::zeros();
        components.liveness = Tensor::scalar(1.0);
        components.depth = Tensor::scalar(1.0);
        components.reflection = Tensor::scalar(1.0);
        components.material = Tensor::scalar(1.0);
        components.triplet_identity = Tensor::scalar(1.0);
        components.triplet_attribute = Tensor::scalar(1.0);
        components.recognition = Tensor::scalar(1.0);
        let weights = LossWeights {
            lambda_rec: 0.0,
            ..Default::default()
        };
        let total = total_stage1_loss(&components, &weights).unwrap();
        assert!((total.value() - 3.3).abs() < 1e-12, "{}", total.value());
    }

    #[test]
    fn total_loss_is_linear_in_components() {
        let mut rng = Rng::new(9);
        let vals: Vec<f64> = (0..7).map(|_| rng.uniform_in(0.0, 2.0)).collect();
        let mk = |scale: f64| LossComponents {
            liveness: Tensor::scalar(vals[0] * scale),
            depth: Tensor::scalar(vals[1] * scale),
            reflection: Tensor::scalar(vals[2] * scale),
            material: Tensor::scalar(vals[3] * scale),
            triplet_identity: Tensor::scalar(vals[4] * scale),
            triplet_attribute: Tensor::scalar(vals[5] * scale),
            recognition: Tensor::scalar(vals[6] * scale),
        };
        let w = LossWeights::default();
        let once = total_stage1_loss(&mk(1.0), &w).unwrap().value();
        let twice = total_stage1_loss(&mk(2.0), &w).unwrap().value();
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn total_loss_names_non_finite_component() {
        let mut components = LossComponents::zeros();
        components.depth = Tensor::scalar(f64::NAN);
        let err = total_stage1_loss(&components, &LossWeights::default()).unwrap_err();
        match err {
            FasError::Numeric(msg) => assert!(msg.contains("depth"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn zero_weight_zeroes_the_component_gradient() {
        let depth_leaf = Tensor::leaf(&[1], vec![0.7]).unwrap();
        let mut components = LossComponents::zeros();
        components.depth = depth_leaf.clone();
        components.liveness = Tensor::leaf(&[1], vec![0.4]).unwrap();
        let weights = LossWeights {
            lambda_d: 0.0,
            ..Default::default()
        };
        total_stage1_loss(&components, &weights)
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(depth_leaf.grad().unwrap(), vec![0.0]);
        assert_eq!(components.liveness.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn every_loss_is_nonnegative_on_random_inputs() {
        let mut rng = Rng::new(10);
        for _ in 0..40 {
            let logits = rng.normal_tensor(&[8]).unwrap();
            assert!(recognition_loss(&logits, rng.below(8)).unwrap().value() >= 0.0);
            let lv = rng.normal_tensor(&[2]).unwrap();
            assert!(liveness_loss(&lv, Liveness::Spoof).unwrap().value() >= 0.0);
            let pred = rng.normal_tensor(&[1, 3, 3]).unwrap();
            let gt = rng.normal_tensor(&[1, 3, 3]).unwrap();
            assert!(depth_loss(&pred, &gt).unwrap().value() >= 0.0);
            let a = rng.normal_tensor(&[4]).unwrap();
            let p = rng.normal_tensor(&[4]).unwrap();
            let n = rng.normal_tensor(&[4]).unwrap();
            assert!(triplet_identity_loss(&a, &p, &n, 0.3).unwrap().value() >= 0.0);
        }
    }
}
