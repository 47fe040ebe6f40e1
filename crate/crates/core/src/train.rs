//! Stage-1 training loop and the end-to-end training pipeline.
//!
//! Each optimizer step draws a batch of liveness samples; every other step
//! additionally feeds a batch of general material patches through the
//! material head, so the 23-way and 3-way branches alternate sources.
//! Heads whose loss weight is zero are skipped entirely and their
//! exclusive parameters stay out of the optimizer's active set.

use crate::config::{RunConfig, ScoreMode};
use crate::error::{FasError, Result};
use crate::loss::{self, mine_triplets, LossComponents, LossWeights, MiningSample};
use crate::model::{HeadMask, Model, PartialBundle};
use crate::nn::{Adam, ParamStore};
use crate::rng::Rng;
use crate::synth::{Liveness, MaterialSample, Sample};
use crate::tensor::Tensor;
use crate::uncertainty::{
    calibrate_variance_norms, estimate_priors, fuse, train_stage2, FusionResult, PriorSet,
};

/// Mean of accumulated scalar loss tensors; zero constant when empty.
fn mean_or_zero(terms: Vec<Tensor>) -> Result<Tensor> {
    if terms.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let n = terms.len() as f64;
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(total.mul_scalar(1.0 / n))
}

fn head_mask(weights: &LossWeights) -> HeadMask {
    HeadMask {
        liveness: weights.lambda_v > 0.0,
        depth: weights.lambda_d > 0.0,
        reflection: weights.lambda_r > 0.0,
        material: weights.lambda_m > 0.0,
        recognition: weights.lambda_rec > 0.0,
        sigma: false,
    }
}

/// Stage-1 parameter groups that may receive gradients for a given step.
fn active_param_filter(
    weights: &LossWeights,
    liveness_via_transfer: bool,
    material_step: bool,
) -> impl Fn(&str) -> bool + '_ {
    let transfer_active = weights.lambda_d > 0.0
        || weights.lambda_r > 0.0
        || weights.lambda_m > 0.0
        || (weights.lambda_v > 0.0 && liveness_via_transfer);
    move |name: &str| {
        if name.starts_with("var.") {
            return false;
        }
        if name.starts_with("phi.") {
            return true;
        }
        if name.starts_with("gamma.") {
            return transfer_active;
        }
        if name.starts_with("psi_v.") || name.starts_with("liveness.") {
            return weights.lambda_v > 0.0;
        }
        if name.starts_with("psi_rec.") || name.starts_with("rec.") {
            return weights.lambda_rec > 0.0;
        }
        if name.starts_with("psi_d.") {
            return weights.lambda_d > 0.0;
        }
        if name.starts_with("psi_r.") {
            return weights.lambda_r > 0.0;
        }
        if name.starts_with("psi_m.") || name.starts_with("mat_v.") {
            return weights.lambda_m > 0.0;
        }
        if name.starts_with("mat_g.") {
            return weights.lambda_m > 0.0 && material_step;
        }
        false
    }
}

/// Forward pass through the material path only: the 23-way logits for one
/// general-material patch.
fn material_general_logits(model: &Model, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let mask = HeadMask {
        liveness: false,
        depth: false,
        reflection: false,
        material: true,
        recognition: false,
        sigma: false,
    };
    let out = model.forward_masked(params, image, mask)?;
    Ok(out.material_logits_general.expect("material head"))
}

struct SampleForward {
    bundle: PartialBundle,
    index: usize,
}

/// One stage-1 run over the training split. Returns trained parameters
/// and the mean batch loss per epoch.
pub fn train_stage1(
    model: &Model,
    cfg: &RunConfig,
    train: &[Sample],
    materials: &[MaterialSample],
    seed: u64,
) -> Result<(ParamStore, Vec<f64>)> {
    if train.is_empty() {
        return Err(FasError::Contract(
            "train_stage1: empty training split".into(),
        ));
    }
    let weights = cfg.losses.weights();
    weights.validate()?;
    if weights.lambda_m > 0.0 && materials.is_empty() {
        return Err(FasError::Contract(
            "train_stage1: lambda_m > 0 needs a general material set".into(),
        ));
    }
    let mining = cfg.losses.mining_mode;
    let mask = head_mask(&weights);
    let rng = Rng::new(seed);
    let mut params = model.init(&mut rng.derive(0))?;
    let mut adam = Adam::new(cfg.training.lr);
    let mut trace = Vec::with_capacity(cfg.training.epochs);
    let mut step: u64 = 0;
    let mut material_cursor = 0usize;

    // Batches are composed half genuine, half spoof (genuine oversampled
    // when scarcer). Balanced batches keep the map heads out of the
    // all-zero collapse the 3:1 spoof-heavy corpus would otherwise push
    // their sigmoids into, and balance the liveness cross-entropy.
    let genuine_pool: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].liveness == Liveness::Genuine)
        .collect();
    let spoof_pool: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].liveness == Liveness::Spoof)
        .collect();
    let single_class = genuine_pool.is_empty() || spoof_pool.is_empty();

    for epoch in 0..cfg.training.epochs {
        let order: Vec<usize> = if single_class {
            let mut order: Vec<usize> = (0..train.len()).collect();
            rng.derive(1 + epoch as u64).shuffle(&mut order);
            order
        } else {
            let mut spoof = spoof_pool.clone();
            rng.derive(1 + epoch as u64).shuffle(&mut spoof);
            let mut genuine = genuine_pool.clone();
            rng.derive(1000 + epoch as u64).shuffle(&mut genuine);
            let mut order = Vec::with_capacity(2 * spoof.len());
            for (k, &s) in spoof.iter().enumerate() {
                order.push(genuine[k % genuine.len()]);
                order.push(s);
            }
            order
        };
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.training.batch_size) {
            let material_step = weights.lambda_m > 0.0 && step.is_multiple_of(2);
            let mut forwards = Vec::with_capacity(chunk.len());
            for &i in chunk {
                forwards.push(SampleForward {
                    bundle: model.forward_masked(&params, &train[i].image, mask)?,
                    index: i,
                });
            }

            let mut lv = Vec::new();
            let mut ld = Vec::new();
            let mut lr = Vec::new();
            let mut lm = Vec::new();
            let mut lrec = Vec::new();
            for fwd in &forwards {
                let sample = &train[fwd.index];
                if weights.lambda_v > 0.0 {
                    lv.push(loss::liveness_loss(
                        fwd.bundle.liveness_logits.as_ref().expect("liveness head"),
                        sample.liveness,
                    )?);
                }
                if weights.lambda_d > 0.0 {
                    ld.push(loss::depth_loss(
                        fwd.bundle.d.as_ref().expect("depth head"),
                        &sample.depth_gt,
                    )?);
                }
                if weights.lambda_r > 0.0 {
                    lr.push(loss::reflection_loss(
                        fwd.bundle.r.as_ref().expect("reflection head"),
                        &sample.reflection_gt,
                    )?);
                }
                if weights.lambda_m > 0.0 {
                    lm.push(loss::material_loss(
                        None,
                        Some((
                            fwd.bundle
                                .material_logits_spoof
                                .as_ref()
                                .expect("material head"),
                            sample.material.index(),
                        )),
                    )?);
                }
                if weights.lambda_rec > 0.0 {
                    lrec.push(loss::recognition_loss(
                        fwd.bundle.id_logits.as_ref().expect("recognition head"),
                        sample.identity,
                    )?);
                }
            }
            if material_step {
                for _ in 0..chunk.len() {
                    let patch = &materials[material_cursor % materials.len()];
                    material_cursor += 1;
                    let logits = material_general_logits(model, &params, &patch.image)?;
                    lm.push(loss::material_loss(Some((&logits, patch.class)), None)?);
                }
            }

            let mut components = LossComponents::zeros();
            components.liveness = mean_or_zero(lv)?;
            components.depth = mean_or_zero(ld)?;
            components.reflection = mean_or_zero(lr)?;
            components.material = mean_or_zero(lm)?;
            components.recognition = mean_or_zero(lrec)?;

            if weights.lambda_t > 0.0 {
                let pooled: Vec<Tensor> = forwards
                    .iter()
                    .map(|f| f.bundle.phi_pooled.clone().expect("shared feature"))
                    .collect();
                let mining_batch: Vec<MiningSample> = forwards
                    .iter()
                    .zip(&pooled)
                    .map(|(f, p)| MiningSample {
                        feature: p.data(),
                        identity: train[f.index].identity,
                        attributes: &train[f.index].attributes,
                        liveness: train[f.index].liveness,
                    })
                    .collect();
                let index = mine_triplets(&mining_batch, mining);
                if let Some(t) =
                    loss::mean_triplet_loss(&pooled, &index.identity_triples, weights.m1)?
                {
                    components.triplet_identity = t;
                }
                if let Some(t) =
                    loss::mean_triplet_loss(&pooled, &index.attribute_triples, weights.m2)?
                {
                    components.triplet_attribute = t;
                }
            }

            let total = loss::total_stage1_loss(&components, &weights)?;
            epoch_loss += total.value();
            batches += 1;
            total.backward()?;
            adam.step_filtered(
                &mut params,
                active_param_filter(&weights, cfg.model.liveness_via_transfer, material_step),
            )?;
            step += 1;
        }
        trace.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((params, trace))
}

/// A trained model ready for scoring: stage-1 parameters, optionally with
/// stage-2 variance heads and channel priors.
pub struct TrainedModel {
    pub model: Model,
    pub params: ParamStore,
    pub priors: Option<PriorSet>,
}

impl TrainedModel {
    /// Spoof score of one image under the configured score mode, plus the
    /// fusion diagnostics when fusion ran.
    pub fn score(&self, cfg: &RunConfig, image: &Tensor) -> Result<(f64, Option<FusionResult>)> {
        match (cfg.uncertainty.score_mode, &self.priors) {
            (ScoreMode::LivenessOnly, _) | (_, None) => {
                let mask = HeadMask {
                    liveness: true,
                    depth: false,
                    reflection: false,
                    material: false,
                    recognition: false,
                    sigma: false,
                };
                let out = self.model.forward_masked(&self.params, image, mask)?;
                let logits = out.liveness_logits.expect("liveness head");
                Ok((loss::spoof_probability(&logits)?, None))
            }
            (ScoreMode::Fused, Some(priors)) => {
                let bundle = self.model.forward_all(&self.params, image, true)?;
                let fusion = fuse(&bundle, priors, cfg.uncertainty.fusion_mode)?;
                Ok((fusion.fused, Some(fusion)))
            }
        }
    }
}

/// Full training pipeline for one data split: K independent stage-1 runs
/// for the prior spread, priors from the primary run, then stage-2
/// variance training. Liveness-only scoring skips the uncertainty stages.
pub fn train_full(
    cfg: &RunConfig,
    train: &[Sample],
    materials: &[MaterialSample],
    seed: u64,
) -> Result<TrainedModel> {
    let model = Model::new(cfg.model.clone())?;
    let base = Rng::new(seed);
    if cfg.uncertainty.score_mode == ScoreMode::LivenessOnly {
        let (params, _) = train_stage1(&model, cfg, train, materials, base.derive(100).seed())?;
        return Ok(TrainedModel {
            model,
            params,
            priors: None,
        });
    }
    if cfg.training.k_runs < 2 {
        return Err(FasError::Contract(format!(
            "training.k_runs must be >= 2 to estimate the prior spread, got {}",
            cfg.training.k_runs
        )));
    }
    let mut runs = Vec::with_capacity(cfg.training.k_runs);
    for k in 0..cfg.training.k_runs {
        let (params, _) = train_stage1(
            &model,
            cfg,
            train,
            materials,
            base.derive(100 + k as u64).seed(),
        )?;
        runs.push(params);
    }
    let refs: Vec<&ParamStore> = runs.iter().collect();
    let mut priors = estimate_priors(&runs[0], &refs, &cfg.model, train)?;
    let mut params = runs.swap_remove(0);
    train_stage2(
        &model,
        &mut params,
        train,
        &priors,
        &cfg.uncertainty.stage2,
        base.derive(200).seed(),
    )?;
    calibrate_variance_norms(&model, &params, train, &mut priors)?;
    Ok(TrainedModel {
        model,
        params,
        priors: Some(priors),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_materials, generate_samples, DataConfig};

    fn small_corpus() -> (RunConfig, Vec<Sample>, Vec<MaterialSample>) {
        let mut cfg = RunConfig {
            data: DataConfig {
                domains: 2,
                identities: 4,
                samples_per_cell: 1,
                material_patches_per_class: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.model.identity_count = 4;
        cfg.training.epochs = 2;
        cfg.training.batch_size = 4;
        cfg.training.lr = 1e-3;
        let samples = generate_samples(&cfg.data, 33).unwrap();
        let materials = generate_materials(&cfg.data, 34).unwrap();
        (cfg, samples, materials)
    }

    #[test]
    fn stage1_runs_and_is_deterministic() {
        let (cfg, samples, materials) = small_corpus();
        let model = Model::new(cfg.model.clone()).unwrap();
        let (p1, trace1) = train_stage1(&model, &cfg, &samples, &materials, 5).unwrap();
        let (p2, trace2) = train_stage1(&model, &cfg, &samples, &materials, 5).unwrap();
        assert_eq!(trace1, trace2);
        for ((n1, t1), (_, t2)) in p1.iter().zip(p2.iter()) {
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{n1}");
            }
        }
        let (p3, _) = train_stage1(&model, &cfg, &samples, &materials, 6).unwrap();
        assert_ne!(
            p1.get("phi.conv1.w").unwrap().data(),
            p3.get("phi.conv1.w").unwrap().data()
        );
    }

    #[test]
    fn zero_weight_head_parameters_never_move() {
        let (mut cfg, samples, materials) = small_corpus();
        cfg.losses.lambda_d = 0.0;
        cfg.losses.lambda_r = 0.0;
        let model = Model::new(cfg.model.clone()).unwrap();
        let fresh = model
            .init(&mut Rng::new(Rng::new(5).derive(0).seed()))
            .unwrap();
        let (trained, _) = train_stage1(&model, &cfg, &samples, &materials, 5).unwrap();
        // depth and reflection hourglasses stay at initialization
        for name in ["psi_d.enc1.w", "psi_d.out.b", "psi_r.mid.w"] {
            assert_eq!(
                trained.get(name).unwrap().data(),
                fresh.get(name).unwrap().data(),
                "{name} should be untouched"
            );
        }
        // while trained heads moved
        assert_ne!(
            trained.get("phi.conv1.w").unwrap().data(),
            fresh.get("phi.conv1.w").unwrap().data()
        );
    }

    #[test]
    fn liveness_loss_decreases_on_separable_toy_batch() {
        // single head on a separable corpus: loss non-increasing over the
        // run in the strong majority of seeds
        let (mut cfg, samples, materials) = small_corpus();
        cfg.losses.lambda_d = 0.0;
        cfg.losses.lambda_r = 0.0;
        cfg.losses.lambda_m = 0.0;
        cfg.losses.lambda_t = 0.0;
        cfg.losses.lambda_rec = 0.0;
        cfg.training.epochs = 6;
        cfg.training.lr = 2e-3;
        let model = Model::new(cfg.model.clone()).unwrap();
        let mut improved = 0;
        for seed in 0..5 {
            let (_, trace) = train_stage1(&model, &cfg, &samples, &materials, seed).unwrap();
            if trace.last().unwrap() < trace.first().unwrap() {
                improved += 1;
            }
        }
        assert!(improved >= 4, "loss improved in only {improved}/5 runs");
    }

    #[test]
    fn train_full_produces_priors_and_scores() {
        let (mut cfg, samples, materials) = small_corpus();
        cfg.training.k_runs = 2;
        cfg.uncertainty.stage2 = crate::uncertainty::Stage2Options {
            epochs: 2,
            lr: 0.01,
            batch_size: 8,
        };
        let trained = train_full(&cfg, &samples, &materials, 5).unwrap();
        assert!(trained.priors.is_some());
        let (score, fusion) = trained.score(&cfg, &samples[0].image).unwrap();
        assert!((0.0..=1.0).contains(&score));
        let fusion = fusion.unwrap();
        assert!((fusion.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn liveness_only_mode_skips_uncertainty() {
        let (mut cfg, samples, materials) = small_corpus();
        cfg.uncertainty.score_mode = ScoreMode::LivenessOnly;
        let trained = train_full(&cfg, &samples, &materials, 5).unwrap();
        assert!(trained.priors.is_none());
        let (score, fusion) = trained.score(&cfg, &samples[0].image).unwrap();
        assert!((0.0..=1.0).contains(&score));
        assert!(fusion.is_none());
    }
}
