//! Stage-2 uncertainty estimation and score fusion.
//!
//! After stage-1 training converges, each channel u gets a Gaussian
//! reference (mu_u, sigma_mu_u): the classifier hyperplane difference for
//! z, the skin hyperplane of the spoof-material head for f, the mean
//! genuine ground-truth depth map for d and the all-zero map for r.
//! sigma_mu_u is estimated from the spread of mu_u across independently
//! seeded stage-1 runs. The per-sample variance sigma_u is then learned by
//! small FC heads against the Gaussian negative log-likelihood while
//! everything else stays frozen, and inference fuses per-channel spoof
//! scores with inverse-total-variance weights.

use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::model::{ChannelBundle, ChannelId, Model, ModelConfig};
use crate::nn::{Adam, ParamStore};
use crate::rng::Rng;
use crate::synth::{Liveness, Sample};
use crate::tensor::Tensor;

/// Per-channel Gaussian reference.
#[derive(Debug, Clone)]
pub struct ChannelPrior {
    pub channel: ChannelId,
    pub mu: Tensor,
    /// sigma_mu squared, the form the likelihood consumes.
    pub sigma_mu_sq: f64,
    /// Feature dimension D of the channel.
    pub d_u: usize,
    /// Training-set mean total variance of this channel, the unit its
    /// fusion weight is measured in. Channels live on very different
    /// variance scales (a map's per-pixel residual versus a feature's
    /// per-coordinate residual), so raw inverse-variance weighting
    /// collapses onto whichever channel is smallest-scaled; dividing by
    /// this constant makes the weights compare each channel to its own
    /// calibration. 1.0 until calibrated.
    pub var_norm: f64,
}

/// Priors for all four channels plus the score calibration constants.
#[derive(Debug, Clone)]
pub struct PriorSet {
    pub z: ChannelPrior,
    pub d: ChannelPrior,
    pub r: ChannelPrior,
    pub f: ChannelPrior,
    /// Depth score scale: mean of genuine training ground-truth map means.
    pub tau_d: f64,
    /// Reflection score scale; shares the depth calibration constant since
    /// genuine reflection maps are zero by convention.
    pub tau_r: f64,
}

impl PriorSet {
    pub fn get(&self, id: ChannelId) -> &ChannelPrior {
        match id {
            ChannelId::Z => &self.z,
            ChannelId::D => &self.d,
            ChannelId::R => &self.r,
            ChannelId::F => &self.f,
        }
    }
}

/// How fusion weights are derived from channel uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// w_u proportional to 1 / (sigma_u^2 + sigma_mu^2).
    InverseVariance,
    /// w = softmax(-NLL), responding to the prior-agreement term too.
    SoftmaxNll,
}

/// Per-channel scores, likelihood terms and the fused spoof score.
#[derive(Debug, Clone)]
pub struct FusionResult {
    /// Channel order follows `ChannelId::ALL`: z, d, r, f.
    pub scores: [f64; 4],
    pub nll: [f64; 4],
    pub total_variance: [f64; 4],
    pub weights: [f64; 4],
    pub fused: f64,
}

/// Reference vector mu_u for one channel.
///
/// z reads the liveness hyperplane difference w0 - w1, f the skin-class
/// hyperplane of the spoof-material head, d the pixelwise mean
/// ground-truth depth map over genuine training samples, r the all-zero
/// map.
pub fn estimate_mu(
    channel: ChannelId,
    params: &ParamStore,
    cfg: &ModelConfig,
    train: &[Sample],
) -> Result<Tensor> {
    match channel {
        ChannelId::Z => {
            let w = params.get("liveness.fc.w")?;
            let d = cfg.feature_dim;
            let diff: Vec<f64> = (0..d).map(|i| w.data()[i] - w.data()[d + i]).collect();
            Tensor::from_vec(&[d], diff)
        }
        ChannelId::F => {
            let w = params.get("mat_v.fc.w")?;
            let d = cfg.feature_dim;
            let skin_row = w.data()[..d].to_vec();
            Tensor::from_vec(&[d], skin_row)
        }
        ChannelId::D => {
            let genuine: Vec<&Sample> = train
                .iter()
                .filter(|s| s.liveness == Liveness::Genuine)
                .collect();
            if genuine.is_empty() {
                return Err(FasError::Contract(
                    "estimate_mu(depth): training split has no genuine samples".into(),
                ));
            }
            let shape = cfg.map_shape();
            let numel: usize = shape.iter().product();
            let mut acc = vec![0.0; numel];
            for s in &genuine {
                for (a, v) in acc.iter_mut().zip(s.depth_gt.data()) {
                    *a += v;
                }
            }
            let n = genuine.len() as f64;
            Tensor::from_vec(&shape, acc.into_iter().map(|v| v / n).collect())
        }
        ChannelId::R => Ok(Tensor::zeros(&cfg.map_shape())),
    }
}

/// Spread of mu_u across independently trained runs: per-coordinate
/// population variance (divisor K), averaged over coordinates, as a
/// standard deviation.
pub fn estimate_sigma_mu(mus: &[Tensor]) -> Result<f64> {
    if mus.len() < 2 {
        return Err(FasError::Contract(format!(
            "estimate_sigma_mu needs >= 2 runs, got {}",
            mus.len()
        )));
    }
    let shape = mus[0].shape();
    if mus.iter().any(|m| m.shape() != shape) {
        return Err(FasError::Dim {
            op: "estimate_sigma_mu",
            detail: "mu shapes differ across runs".into(),
        });
    }
    let k = mus.len() as f64;
    let numel = mus[0].numel();
    let mut var_sum = 0.0;
    for i in 0..numel {
        let mean: f64 = mus.iter().map(|m| m.data()[i]).sum::<f64>() / k;
        let var: f64 = mus
            .iter()
            .map(|m| (m.data()[i] - mean).powi(2))
            .sum::<f64>()
            / k;
        var_sum += var;
    }
    Ok((var_sum / numel as f64).sqrt())
}

/// Depth/reflection score calibration: mean over genuine training samples
/// of their ground-truth depth map means. Genuine reflection maps are
/// zero by convention, so the depth constant serves both channels.
pub fn estimate_tau(train: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in train.iter().filter(|s| s.liveness == Liveness::Genuine) {
        sum += s.depth_gt.data().iter().sum::<f64>() / s.depth_gt.numel() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(FasError::Contract(
            "estimate_tau: no genuine samples".into(),
        ));
    }
    let tau = sum / count as f64;
    if tau <= 0.0 {
        return Err(FasError::Numeric(
            "estimate_tau: genuine depth means are zero".into(),
        ));
    }
    Ok(tau)
}

/// Builds the full prior set: mu from the primary run, sigma_mu from the
/// spread across all runs.
pub fn estimate_priors(
    primary: &ParamStore,
    runs: &[&ParamStore],
    cfg: &ModelConfig,
    train: &[Sample],
) -> Result<PriorSet> {
    if runs.len() < 2 {
        return Err(FasError::Contract(format!(
            "estimate_priors needs >= 2 stage-1 runs, got {}",
            runs.len()
        )));
    }
    let tau = estimate_tau(train)?;
    let build = |channel: ChannelId| -> Result<ChannelPrior> {
        let mu = estimate_mu(channel, primary, cfg, train)?;
        let mus: Vec<Tensor> = runs
            .iter()
            .map(|p| estimate_mu(channel, p, cfg, train))
            .collect::<Result<_>>()?;
        let sigma_mu = estimate_sigma_mu(&mus)?;
        Ok(ChannelPrior {
            channel,
            mu: mu.clone(),
            sigma_mu_sq: sigma_mu * sigma_mu,
            d_u: mu.numel(),
            var_norm: 1.0,
        })
    };
    Ok(PriorSet {
        z: build(ChannelId::Z)?,
        d: build(ChannelId::D)?,
        r: build(ChannelId::R)?,
        f: build(ChannelId::F)?,
        tau_d: tau,
        tau_r: tau,
    })
}

/// Gaussian negative log-likelihood of one channel:
/// ||u - mu||^2 / (2 (sigma_u^2 + sigma_mu^2)) + (D/2) log(sigma_u^2 + sigma_mu^2).
///
/// `sigma_u` is a one-element tensor so the objective can train the
/// variance heads; everything else enters as constants.
pub fn uncertainty_loss(
    u: &Tensor,
    mu: &Tensor,
    sigma_u: &Tensor,
    sigma_mu_sq: f64,
    d_u: usize,
) -> Result<Tensor> {
    if u.shape() != mu.shape() {
        return Err(FasError::Dim {
            op: "uncertainty_loss",
            detail: format!("u {:?} vs mu {:?}", u.shape(), mu.shape()),
        });
    }
    if sigma_u.numel() != 1 {
        return Err(FasError::Contract("sigma_u must be a scalar tensor".into()));
    }
    if sigma_u.value() <= 0.0 {
        return Err(FasError::Contract(format!(
            "sigma_u must be positive, got {}",
            sigma_u.value()
        )));
    }
    if sigma_mu_sq < 0.0 {
        return Err(FasError::Contract(
            "sigma_mu_sq must be non-negative".into(),
        ));
    }
    let residual = u.sq_dist(mu)?;
    let total_var = sigma_u.mul(sigma_u)?.add_scalar(sigma_mu_sq);
    let fit = residual.div(&total_var.mul_scalar(2.0))?;
    let reg = total_var.log().mul_scalar(d_u as f64 / 2.0);
    fit.add(&reg)
}

/// Same likelihood computed from a cached squared residual.
pub fn uncertainty_loss_cached(
    residual_sq: f64,
    sigma_u: &Tensor,
    sigma_mu_sq: f64,
    d_u: usize,
) -> Result<Tensor> {
    if sigma_u.numel() != 1 || sigma_u.value() <= 0.0 {
        return Err(FasError::Contract(format!(
            "sigma_u must be a positive scalar, got {:?}",
            sigma_u.shape()
        )));
    }
    let total_var = sigma_u.mul(sigma_u)?.add_scalar(sigma_mu_sq);
    let fit = Tensor::scalar(residual_sq).div(&total_var.mul_scalar(2.0))?;
    let reg = total_var.log().mul_scalar(d_u as f64 / 2.0);
    fit.add(&reg)
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Scalar spoof score of one channel in [0, 1].
pub fn channel_score(bundle: &ChannelBundle, channel: ChannelId, priors: &PriorSet) -> Result<f64> {
    Ok(match channel {
        ChannelId::Z => bundle.liveness_logits.softmax()?.data()[0],
        ChannelId::D => {
            let mean = bundle.d.data().iter().sum::<f64>() / bundle.d.numel() as f64;
            1.0 - clamp01(mean / priors.tau_d)
        }
        ChannelId::R => {
            let mean = bundle.r.data().iter().sum::<f64>() / bundle.r.numel() as f64;
            clamp01(mean / priors.tau_r)
        }
        ChannelId::F => {
            let skin = bundle.material_logits_spoof.softmax()?.data()[0];
            1.0 - skin
        }
    })
}

/// Fuses the four channel scores with uncertainty-derived weights.
pub fn fuse(bundle: &ChannelBundle, priors: &PriorSet, mode: FusionMode) -> Result<FusionResult> {
    let mut scores = [0.0; 4];
    let mut nll = [0.0; 4];
    let mut total_variance = [0.0; 4];
    for (i, id) in ChannelId::ALL.into_iter().enumerate() {
        let prior = priors.get(id);
        let sigma_u = bundle.sigma.get(id);
        scores[i] = channel_score(bundle, id, priors)?;
        total_variance[i] = sigma_u.value() * sigma_u.value() + prior.sigma_mu_sq;
        nll[i] = uncertainty_loss(
            bundle.channel_feature(id),
            &prior.mu,
            &sigma_u.detach(),
            prior.sigma_mu_sq,
            prior.d_u,
        )?
        .value();
    }
    let weights = match mode {
        FusionMode::InverseVariance => {
            // each channel's variance is measured against its own
            // training-set calibration before the inverse weighting
            let inv: Vec<f64> = ChannelId::ALL
                .into_iter()
                .enumerate()
                .map(|(i, id)| priors.get(id).var_norm / total_variance[i])
                .collect();
            let sum: f64 = inv.iter().sum();
            [inv[0] / sum, inv[1] / sum, inv[2] / sum, inv[3] / sum]
        }
        FusionMode::SoftmaxNll => {
            let max = nll.iter().cloned().fold(f64::INFINITY, f64::min);
            let exps: Vec<f64> = nll.iter().map(|v| (-(v - max)).exp()).collect();
            let sum: f64 = exps.iter().sum();
            [exps[0] / sum, exps[1] / sum, exps[2] / sum, exps[3] / sum]
        }
    };
    let fused = weights.iter().zip(&scores).map(|(w, s)| w * s).sum();
    Ok(FusionResult {
        scores,
        nll,
        total_variance,
        weights,
        fused,
    })
}

/// Frozen per-sample channel features for stage-2 training: the variance
/// head input (already pooled to D dims) and the squared residual to the
/// channel prior.
pub struct CachedChannelFeatures {
    pub pooled: [Tensor; 4],
    pub residual_sq: [f64; 4],
}

/// Runs the frozen stage-1 network over the training set once and caches
/// what the variance objective needs.
pub fn cache_stage2_features(
    model: &Model,
    params: &ParamStore,
    samples: &[Sample],
    priors: &PriorSet,
) -> Result<Vec<CachedChannelFeatures>> {
    let d = model.cfg.feature_dim;
    let mask = crate::model::HeadMask {
        liveness: true,
        depth: true,
        reflection: true,
        material: true,
        recognition: false,
        sigma: false,
    };
    samples
        .iter()
        .map(|sample| {
            let out = model.forward_masked(params, &sample.image, mask)?;
            let feats = [
                out.z.as_ref().expect("liveness head").detach(),
                out.d.as_ref().expect("depth head").detach(),
                out.r.as_ref().expect("reflection head").detach(),
                out.f.as_ref().expect("material head").detach(),
            ];
            let mut pooled: Vec<Tensor> = Vec::with_capacity(4);
            let mut residual_sq = [0.0; 4];
            for (i, id) in ChannelId::ALL.into_iter().enumerate() {
                let u = &feats[i];
                let prior = priors.get(id);
                residual_sq[i] = u
                    .data()
                    .iter()
                    .zip(prior.mu.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                pooled.push(if u.shape() == [d] {
                    u.clone()
                } else {
                    u.mean_groups(d)?
                });
            }
            Ok(CachedChannelFeatures {
                pooled: pooled.try_into().expect("four channels"),
                residual_sq,
            })
        })
        .collect()
}

/// Sets each channel's variance unit to its training-set mean total
/// variance under the trained variance heads. Run after stage-2 training.
pub fn calibrate_variance_norms(
    model: &Model,
    params: &ParamStore,
    samples: &[Sample],
    priors: &mut PriorSet,
) -> Result<()> {
    if samples.is_empty() {
        return Err(FasError::Contract(
            "calibrate_variance_norms: empty training set".into(),
        ));
    }
    let cached = cache_stage2_features(model, params, samples, priors)?;
    // geometric mean: per-sample variances of a channel spread over
    // orders of magnitude, and an arithmetic mean would sit so far above
    // the typical sample that the channel monopolizes the fused weights
    let mut log_sums = [0.0f64; 4];
    for feats in &cached {
        for (i, id) in ChannelId::ALL.into_iter().enumerate() {
            let sigma = model.variance_head(params, id, &feats.pooled[i])?.value();
            log_sums[i] += (sigma * sigma + priors.get(id).sigma_mu_sq).ln();
        }
    }
    let n = cached.len() as f64;
    priors.z.var_norm = (log_sums[0] / n).exp();
    priors.d.var_norm = (log_sums[1] / n).exp();
    priors.r.var_norm = (log_sums[2] / n).exp();
    priors.f.var_norm = (log_sums[3] / n).exp();
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Options {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            epochs: 40,
            lr: 0.01,
            batch_size: 16,
        }
    }
}

/// Trains the variance heads against the summed channel likelihoods with
/// every other parameter frozen. Returns the full-set mean loss after
/// each epoch.
///
/// The freeze is enforced twice: channel features enter the objective
/// detached, and after every backward pass any gradient on a non-variance
/// parameter raises a contract error.
pub fn train_stage2(
    model: &Model,
    params: &mut ParamStore,
    samples: &[Sample],
    priors: &PriorSet,
    opts: &Stage2Options,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(FasError::Contract(
            "train_stage2: empty training set".into(),
        ));
    }
    let cached = cache_stage2_features(model, params, samples, priors)?;
    let mut adam = Adam::new(opts.lr);
    let rng = Rng::new(seed);
    let mut trace = Vec::with_capacity(opts.epochs);

    let sample_loss = |params: &ParamStore, feats: &CachedChannelFeatures| -> Result<Tensor> {
        let mut total = Tensor::scalar(0.0);
        for (i, id) in ChannelId::ALL.into_iter().enumerate() {
            let sigma = model.variance_head(params, id, &feats.pooled[i])?;
            let prior = priors.get(id);
            let nll = uncertainty_loss_cached(
                feats.residual_sq[i],
                &sigma,
                prior.sigma_mu_sq,
                prior.d_u,
            )?;
            total = total.add(&nll)?;
        }
        Ok(total)
    };

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..cached.len()).collect();
        rng.derive(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let mut batch_loss = Tensor::scalar(0.0);
            for &i in chunk {
                batch_loss = batch_loss.add(&sample_loss(params, &cached[i])?)?;
            }
            batch_loss.mul_scalar(1.0 / chunk.len() as f64).backward()?;
            for (name, p) in params.iter() {
                if !name.starts_with("var.") {
                    if let Some(g) = p.grad() {
                        if g.iter().any(|&v| v != 0.0) {
                            return Err(FasError::Contract(format!(
                                "stage-2 freeze violated: {name} received a gradient"
                            )));
                        }
                    }
                }
            }
            adam.step_filtered(params, |n| n.starts_with("var."))?;
        }
        let mut epoch_loss = 0.0;
        for feats in &cached {
            epoch_loss += sample_loss(params, feats)?.value();
        }
        trace.push(epoch_loss / cached.len() as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SIGMA_EPS;
    use crate::synth::{render_scene, AttackType, SceneSpec};
    use crate::tensor::finite_diff_check;

    fn tiny_training_split() -> Vec<Sample> {
        let mut out = Vec::new();
        for identity in 0..4 {
            for attack in AttackType::ALL {
                out.push(
                    render_scene(&SceneSpec {
                        attack,
                        domain: identity % 2,
                        identity,
                        sample_index: 0,
                        seed: 42,
                        image_size: 32,
                    })
                    .unwrap(),
                );
            }
        }
        out
    }

    fn model_and_params() -> (Model, ParamStore) {
        let model = Model::new(ModelConfig::default()).unwrap();
        let params = model.init(&mut Rng::new(17)).unwrap();
        (model, params)
    }

    #[test]
    fn mu_for_reflection_is_zero_map() {
        let (model, params) = model_and_params();
        let train = tiny_training_split();
        let mu = estimate_mu(ChannelId::R, &params, &model.cfg, &train).unwrap();
        assert_eq!(mu.shape(), &[1, 32, 32]);
        assert!(mu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mu_for_depth_is_mean_of_two_genuine_maps() {
        let (model, params) = model_and_params();
        let a = render_scene(&SceneSpec {
            attack: AttackType::None,
            domain: 0,
            identity: 0,
            sample_index: 0,
            seed: 1,
            image_size: 32,
        })
        .unwrap();
        let b = render_scene(&SceneSpec {
            attack: AttackType::None,
            domain: 0,
            identity: 1,
            sample_index: 0,
            seed: 1,
            image_size: 32,
        })
        .unwrap();
        let mu = estimate_mu(ChannelId::D, &params, &model.cfg, &[a.clone(), b.clone()]).unwrap();
        for ((m, x), y) in mu
            .data()
            .iter()
            .zip(a.depth_gt.data())
            .zip(b.depth_gt.data())
        {
            assert!((m - 0.5 * (x + y)).abs() < 1e-15);
        }
    }

    #[test]
    fn mu_for_depth_without_genuine_is_contract_error() {
        let (model, params) = model_and_params();
        let spoof_only: Vec<Sample> = tiny_training_split()
            .into_iter()
            .filter(|s| s.liveness == Liveness::Spoof)
            .collect();
        assert!(matches!(
            estimate_mu(ChannelId::D, &params, &model.cfg, &spoof_only),
            Err(FasError::Contract(_))
        ));
    }

    #[test]
    fn mu_for_liveness_is_hyperplane_difference_bit_exact() {
        let (model, params) = model_and_params();
        let mu = estimate_mu(ChannelId::Z, &params, &model.cfg, &[]).unwrap();
        let w = params.get("liveness.fc.w").unwrap();
        let d = model.cfg.feature_dim;
        for i in 0..d {
            assert_eq!(
                mu.data()[i].to_bits(),
                (w.data()[i] - w.data()[d + i]).to_bits()
            );
        }
    }

    #[test]
    fn sigma_mu_of_identical_checkpoints_is_zero() {
        let mu = Rng::new(3).normal_tensor(&[8]).unwrap();
        assert_eq!(
            estimate_sigma_mu(&[mu.clone(), mu.clone(), mu]).unwrap(),
            0.0
        );
    }

    #[test]
    fn sigma_mu_population_convention_hand_case() {
        // scalar mu of 1 and 3: population variance (divisor K) is 1
        let a = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        assert!((estimate_sigma_mu(&[a, b]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigma_mu_matches_brute_force_oracle() {
        let mut rng = Rng::new(4);
        let mus: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[6]).unwrap()).collect();
        let got = estimate_sigma_mu(&mus).unwrap();
        // independent brute-force per-coordinate variance then mean
        let mut acc = 0.0;
        for i in 0..6 {
            let vals: Vec<f64> = mus.iter().map(|m| m.data()[i]).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            acc += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        }
        let want = (acc / 6.0).sqrt();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn sigma_mu_needs_two_runs() {
        let mu = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            estimate_sigma_mu(&[mu]),
            Err(FasError::Contract(_))
        ));
    }

    #[test]
    fn uncertainty_loss_vanishes_at_unit_variance_zero_residual() {
        let u = Tensor::from_vec(&[4], vec![0.5; 4]).unwrap();
        let sigma = Tensor::scalar(1.0);
        let loss = uncertainty_loss(&u, &u, &sigma, 0.0, 4).unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn uncertainty_loss_minimum_matches_stationarity() {
        // D = 2, ||u - mu||^2 = 2, sigma_mu = 0: optimum sigma^2 = 1 and
        // the loss value there is 1
        let u = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let mu = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let at_opt = uncertainty_loss(&u, &mu, &Tensor::scalar(1.0), 0.0, 2)
            .unwrap()
            .value();
        assert!((at_opt - 1.0).abs() < 1e-12);
        for sigma in [0.5, 0.8, 1.3, 2.0] {
            let v = uncertainty_loss(&u, &mu, &Tensor::scalar(sigma), 0.0, 2)
                .unwrap()
                .value();
            assert!(v > at_opt, "sigma {sigma}: {v} vs optimum {at_opt}");
        }
    }

    #[test]
    fn uncertainty_loss_rejects_non_positive_sigma() {
        let u = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let r = uncertainty_loss(&u, &u, &Tensor::scalar(0.0), 0.0, 2);
        assert!(matches!(r, Err(FasError::Contract(_))));
    }

    #[test]
    fn uncertainty_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..25 {
            let u = rng.normal_tensor(&[6]).unwrap();
            let mu = rng.normal_tensor(&[6]).unwrap();
            let sigma0 = Tensor::from_vec(&[1], vec![rng.uniform_in(0.3, 2.0)]).unwrap();
            let err = finite_diff_check(
                |s| uncertainty_loss(&u, &mu, s, 0.2, 6),
                &sigma0,
                1e-3,
                None,
            )
            .unwrap();
            assert!(err < 1e-4, "sigma gradient err {err}");
            // and w.r.t. u as well
            let sigma = Tensor::scalar(0.9);
            let err_u =
                finite_diff_check(|t| uncertainty_loss(t, &mu, &sigma, 0.2, 6), &u, 1e-3, None)
                    .unwrap();
            assert!(err_u < 1e-4, "u gradient err {err_u}");
        }
    }

    fn synthetic_bundle(
        d_fill: f64,
        r_fill: f64,
        sigmas: [f64; 4],
        spoof_logit: f64,
        skin_logit: f64,
    ) -> ChannelBundle {
        ChannelBundle {
            z: Tensor::zeros(&[32]),
            liveness_logits: Tensor::from_vec(&[2], vec![spoof_logit, 0.0]).unwrap(),
            d: Tensor::full(&[1, 32, 32], d_fill),
            r: Tensor::full(&[1, 32, 32], r_fill),
            f: Tensor::zeros(&[32]),
            material_logits_general: Tensor::zeros(&[23]),
            material_logits_spoof: Tensor::from_vec(&[3], vec![skin_logit, 0.0, 0.0]).unwrap(),
            id_logits: Tensor::zeros(&[8]),
            sigma: crate::model::ChannelSigmas {
                z: Tensor::scalar(sigmas[0]),
                d: Tensor::scalar(sigmas[1]),
                r: Tensor::scalar(sigmas[2]),
                f: Tensor::scalar(sigmas[3]),
            },
        }
    }

    fn synthetic_priors() -> PriorSet {
        let map = Tensor::full(&[1, 32, 32], 0.4);
        PriorSet {
            z: ChannelPrior {
                channel: ChannelId::Z,
                mu: Tensor::zeros(&[32]),
                sigma_mu_sq: 0.0,
                d_u: 32,
                var_norm: 1.0,
            },
            d: ChannelPrior {
                channel: ChannelId::D,
                mu: map,
                sigma_mu_sq: 0.0,
                d_u: 1024,
                var_norm: 1.0,
            },
            r: ChannelPrior {
                channel: ChannelId::R,
                mu: Tensor::zeros(&[1, 32, 32]),
                sigma_mu_sq: 0.0,
                d_u: 1024,
                var_norm: 1.0,
            },
            f: ChannelPrior {
                channel: ChannelId::F,
                mu: Tensor::zeros(&[32]),
                sigma_mu_sq: 0.0,
                d_u: 32,
                var_norm: 1.0,
            },
            tau_d: 0.4,
            tau_r: 0.4,
        }
    }

    #[test]
    fn channel_scores_hit_their_conventions() {
        let priors = synthetic_priors();
        // all-zero depth map: flat surface, spoof signature
        let b = synthetic_bundle(0.0, 0.0, [1.0; 4], 0.0, 30.0);
        assert_eq!(channel_score(&b, ChannelId::D, &priors).unwrap(), 1.0);
        // all-zero reflection map: genuine signature
        assert_eq!(channel_score(&b, ChannelId::R, &priors).unwrap(), 0.0);
        // saturated skin logit: material spoof score vanishes
        assert!(channel_score(&b, ChannelId::F, &priors).unwrap() < 1e-12);
    }

    #[test]
    fn equal_variances_fuse_to_plain_mean() {
        let priors = synthetic_priors();
        let b = synthetic_bundle(0.1, 0.2, [0.7; 4], 1.0, 2.0);
        let fusion = fuse(&b, &priors, FusionMode::InverseVariance).unwrap();
        for w in fusion.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
        let mean = fusion.scores.iter().sum::<f64>() / 4.0;
        assert!((fusion.fused - mean).abs() < 1e-12);
    }

    #[test]
    fn huge_variance_channel_loses_its_weight() {
        let priors = synthetic_priors();
        let b = synthetic_bundle(0.1, 0.2, [1.0, 1e6, 1.0, 1.0], 1.0, 2.0);
        let fusion = fuse(&b, &priors, FusionMode::InverseVariance).unwrap();
        assert!(
            fusion.weights[1] < 1e-10,
            "depth weight {}",
            fusion.weights[1]
        );
        let others: f64 = [0, 2, 3]
            .iter()
            .map(|&i| fusion.weights[i] * fusion.scores[i])
            .sum();
        let renorm: f64 = [0, 2, 3].iter().map(|&i| fusion.weights[i]).sum();
        assert!((fusion.fused - others / renorm).abs() < 1e-6);
    }

    #[test]
    fn uncertain_depth_dissent_is_outvoted() {
        // three channels call spoof at 0.9 with small variance, depth says
        // 0.1 with 100x the total variance: fusion stays above 0.8
        let priors = synthetic_priors();
        let sigma_small = 0.1f64;
        let sigma_big = 1.0f64; // 100x total variance
        let mut b = synthetic_bundle(
            0.0,
            0.0,
            [sigma_small, sigma_big, sigma_small, sigma_small],
            30.0,
            -30.0,
        );
        // depth score 0.1 <=> mean depth = 0.9 * tau
        b.d = Tensor::full(&[1, 32, 32], 0.9 * priors.tau_d);
        // reflection score 0.9
        b.r = Tensor::full(&[1, 32, 32], 0.9 * priors.tau_r);
        let fusion = fuse(&b, &priors, FusionMode::InverseVariance).unwrap();
        assert!((fusion.scores[0] - 1.0).abs() < 1e-9);
        assert!((fusion.scores[1] - 0.1).abs() < 1e-9);
        assert!(fusion.fused > 0.8, "fused {}", fusion.fused);
    }

    #[test]
    fn weights_form_simplex_and_fused_is_bounded() {
        let priors = synthetic_priors();
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let b = synthetic_bundle(
                rng.uniform_in(0.0, 0.6),
                rng.uniform_in(0.0, 0.6),
                [
                    rng.uniform_in(0.05, 3.0),
                    rng.uniform_in(0.05, 3.0),
                    rng.uniform_in(0.05, 3.0),
                    rng.uniform_in(0.05, 3.0),
                ],
                rng.normal(),
                rng.normal(),
            );
            for mode in [FusionMode::InverseVariance, FusionMode::SoftmaxNll] {
                let fusion = fuse(&b, &priors, mode).unwrap();
                let sum: f64 = fusion.weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(fusion.weights.iter().all(|&w| w >= 0.0));
                let lo = fusion.scores.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = fusion
                    .scores
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(fusion.fused >= lo - 1e-12 && fusion.fused <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn common_variance_scale_leaves_weights_unchanged() {
        let priors = synthetic_priors();
        let base = [0.3, 0.9, 0.5, 1.4];
        let b1 = synthetic_bundle(0.1, 0.1, base, 0.5, 0.5);
        let scaled: [f64; 4] = std::array::from_fn(|i| base[i] * 3.0);
        let b2 = synthetic_bundle(0.1, 0.1, scaled, 0.5, 0.5);
        let f1 = fuse(&b1, &priors, FusionMode::InverseVariance).unwrap();
        let f2 = fuse(&b2, &priors, FusionMode::InverseVariance).unwrap();
        for (a, b) in f1.weights.iter().zip(&f2.weights) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((f1.fused - f2.fused).abs() < 1e-12);
    }

    #[test]
    fn raising_one_sigma_strictly_lowers_its_weight() {
        let priors = synthetic_priors();
        let mut prev = f64::INFINITY;
        for sigma_d in [0.2, 0.5, 1.0, 2.0, 5.0] {
            let b = synthetic_bundle(0.1, 0.1, [0.4, sigma_d, 0.4, 0.4], 0.5, 0.5);
            let f = fuse(&b, &priors, FusionMode::InverseVariance).unwrap();
            assert!(
                f.weights[1] < prev,
                "sigma_d {sigma_d}: weight {}",
                f.weights[1]
            );
            prev = f.weights[1];
        }
    }

    #[test]
    fn stage2_learns_the_analytic_optimum_on_one_residual() {
        // single channel, sigma_mu = 0: sigma^2 converges to ||u-mu||^2 / D
        let (model, mut params) = model_and_params();
        let u = Rng::new(8).normal_tensor(&[32]).unwrap();
        let residual_sq: f64 = u.data().iter().map(|v| v * v).sum();
        let target = residual_sq / 32.0;
        let mut adam = Adam::new(0.02);
        for _ in 0..2500 {
            let sigma = model.variance_head(&params, ChannelId::Z, &u).unwrap();
            let loss = uncertainty_loss_cached(residual_sq, &sigma, 0.0, 32).unwrap();
            loss.backward().unwrap();
            adam.step_filtered(&mut params, |n| n.starts_with("var.z."))
                .unwrap();
        }
        let sigma = model
            .variance_head(&params, ChannelId::Z, &u)
            .unwrap()
            .value();
        let rel = ((sigma * sigma - target) / target).abs();
        assert!(
            rel < 0.01,
            "sigma^2 {} vs target {target}: rel {rel}",
            sigma * sigma
        );
    }

    #[test]
    fn stage2_freezes_everything_but_variance_heads() {
        let (model, mut params) = model_and_params();
        let train = tiny_training_split();
        let runs = model.init(&mut Rng::new(18)).unwrap();
        let priors = estimate_priors(&params, &[&params, &runs], &model.cfg, &train).unwrap();
        let before: Vec<(String, Vec<f64>)> = params
            .iter()
            .filter(|(n, _)| !n.starts_with("var."))
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        let var_before: Vec<f64> = params.get("var.z.fc2.w").unwrap().data().to_vec();
        let opts = Stage2Options {
            epochs: 3,
            lr: 0.02,
            batch_size: 8,
        };
        let trace = train_stage2(&model, &mut params, &train, &priors, &opts, 5).unwrap();
        assert_eq!(trace.len(), 3);
        for (name, data) in before {
            let now = params.get(&name).unwrap();
            for (a, b) in data.iter().zip(now.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} drifted");
            }
        }
        assert_ne!(var_before, params.get("var.z.fc2.w").unwrap().data());
    }

    #[test]
    fn stage2_loss_trace_is_non_increasing() {
        let (model, mut params) = model_and_params();
        let train = tiny_training_split();
        let other = model.init(&mut Rng::new(19)).unwrap();
        let priors = estimate_priors(&params, &[&params, &other], &model.cfg, &train).unwrap();
        // full-batch descent at a small step keeps the sweep monotone
        let opts = Stage2Options {
            epochs: 10,
            lr: 0.001,
            batch_size: train.len(),
        };
        let trace = train_stage2(&model, &mut params, &train, &priors, &opts, 6).unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "trace {trace:?}");
        }
    }

    #[test]
    fn sigma_floor_keeps_variance_positive() {
        let (model, mut params) = model_and_params();
        for fc in ["var.z.fc1.w", "var.z.fc2.w"] {
            let n = params.get(fc).unwrap().numel();
            params.set_data(fc, vec![-10.0; n]).unwrap();
        }
        let u = Tensor::full(&[32], 5.0);
        let sigma = model
            .variance_head(&params, ChannelId::Z, &u)
            .unwrap()
            .value();
        assert!(sigma >= SIGMA_EPS);
    }
}
