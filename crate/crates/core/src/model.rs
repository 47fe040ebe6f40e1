//! Full model assembly: shared encoder, transfer module, and the liveness,
//! depth, reflection, material and identity heads plus per-channel
//! variance heads.
//!
//! Head wiring: the liveness feature and the identity pretext read the
//! shared encoder output directly; depth, reflection and material read the
//! transfer module output. A config flag can reroute liveness through the
//! transfer module for the alternative reading.

use crate::error::{FasError, Result};
use crate::nn::{conv_forward, fc_forward, init_params, Hourglass, LayerSpec, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GENERAL_MATERIAL_CLASSES: usize = 23;
pub const SPOOF_MATERIAL_CLASSES: usize = 3;

/// Variance heads always produce at least this floor above zero.
pub const SIGMA_EPS: f64 = 1e-6;

/// Scoring channels of the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelId {
    /// Liveness feature z.
    Z,
    /// Depth map.
    D,
    /// Reflection map.
    R,
    /// Material feature f.
    F,
}

impl ChannelId {
    pub const ALL: [ChannelId; 4] = [ChannelId::Z, ChannelId::D, ChannelId::R, ChannelId::F];

    pub fn key(&self) -> &'static str {
        match self {
            ChannelId::Z => "z",
            ChannelId::D => "d",
            ChannelId::R => "r",
            ChannelId::F => "f",
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input image shape [channels, height, width].
    pub image_shape: [usize; 3],
    /// Encoder channel widths for the two pooling stages.
    pub encoder_widths: [usize; 2],
    /// Channel feature length D for z and f.
    pub feature_dim: usize,
    /// Identity count of the recognition pretext.
    pub identity_count: usize,
    /// Route the liveness head through the transfer module instead of
    /// reading the shared encoder directly.
    pub liveness_via_transfer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_shape: [3, 32, 32],
            encoder_widths: [16, 32],
            feature_dim: 32,
            identity_count: 8,
            liveness_via_transfer: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if c != 3 {
            return Err(FasError::Config(format!(
                "image_shape must have 3 channels, got {c}"
            )));
        }
        if h != w || !h.is_multiple_of(16) || h < 16 {
            return Err(FasError::Config(format!(
                "image extents must be square multiples of 16, got {h}x{w}"
            )));
        }
        if self.feature_dim < 2 {
            return Err(FasError::Config("feature_dim must be >= 2".into()));
        }
        if self.identity_count < 4 {
            return Err(FasError::Config(
                "identity_count must be >= 4 (triplet mining needs multiple identities)".into(),
            ));
        }
        let map_elems = h * w;
        if !map_elems.is_multiple_of(self.feature_dim) {
            return Err(FasError::Config(format!(
                "map size {map_elems} must divide into feature_dim {} groups",
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Spatial map shape shared by the depth and reflection heads.
    pub fn map_shape(&self) -> [usize; 3] {
        [1, self.image_shape[1], self.image_shape[2]]
    }
}

/// Per-channel variance scalars; placeholder 1.0 when the variance heads
/// are disabled (stage 1).
#[derive(Debug, Clone)]
pub struct ChannelSigmas {
    pub z: Tensor,
    pub d: Tensor,
    pub r: Tensor,
    pub f: Tensor,
}

impl ChannelSigmas {
    pub fn get(&self, id: ChannelId) -> &Tensor {
        match id {
            ChannelId::Z => &self.z,
            ChannelId::D => &self.d,
            ChannelId::R => &self.r,
            ChannelId::F => &self.f,
        }
    }
}

/// Per-input forward outputs of every head.
#[derive(Debug, Clone)]
pub struct ChannelBundle {
    pub z: Tensor,
    pub liveness_logits: Tensor,
    pub d: Tensor,
    pub r: Tensor,
    pub f: Tensor,
    pub material_logits_general: Tensor,
    pub material_logits_spoof: Tensor,
    pub id_logits: Tensor,
    pub sigma: ChannelSigmas,
}

impl ChannelBundle {
    /// Channel feature entering the Gaussian likelihood: z and f are the
    /// D-dim features, depth and reflection are their full maps.
    pub fn channel_feature(&self, id: ChannelId) -> &Tensor {
        match id {
            ChannelId::Z => &self.z,
            ChannelId::D => &self.d,
            ChannelId::R => &self.r,
            ChannelId::F => &self.f,
        }
    }
}

/// Which heads a forward pass should evaluate.
#[derive(Debug, Clone, Copy)]
pub struct HeadMask {
    pub liveness: bool,
    pub depth: bool,
    pub reflection: bool,
    pub material: bool,
    pub recognition: bool,
    pub sigma: bool,
}

impl HeadMask {
    pub fn all(sigma: bool) -> Self {
        HeadMask {
            liveness: true,
            depth: true,
            reflection: true,
            material: true,
            recognition: true,
            sigma,
        }
    }
}

/// Partial forward outputs under a `HeadMask`.
#[derive(Debug, Default)]
pub struct PartialBundle {
    pub z: Option<Tensor>,
    pub liveness_logits: Option<Tensor>,
    pub d: Option<Tensor>,
    pub r: Option<Tensor>,
    pub f: Option<Tensor>,
    pub material_logits_general: Option<Tensor>,
    pub material_logits_spoof: Option<Tensor>,
    pub id_logits: Option<Tensor>,
    pub sigma: Option<ChannelSigmas>,
    /// Shared encoder feature, mean-pooled per channel; the embedding the
    /// triplet losses operate on.
    pub phi_pooled: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    hg_depth: Hourglass,
    hg_refl: Hourglass,
    var_hidden: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let enc_out = cfg.encoder_widths[1];
        let mid = cfg.encoder_widths[0];
        let up = (cfg.encoder_widths[0] / 2).max(4);
        // feature maps sit at H/4; two extra upsampling stages return the
        // decoder to full input resolution
        let hg_depth = Hourglass::new("psi_d", enc_out, mid, up, 2);
        let hg_refl = Hourglass::new("psi_r", enc_out, mid, up, 2);
        let var_hidden = (cfg.feature_dim / 2).max(4);
        Ok(Model {
            cfg,
            hg_depth,
            hg_refl,
            var_hidden,
        })
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let d = self.cfg.feature_dim;
        let [w0, w1] = self.cfg.encoder_widths;
        let mut specs = vec![
            LayerSpec::conv("phi.conv1", self.cfg.image_shape[0], w0, 3),
            LayerSpec::conv("phi.conv2", w0, w1, 3),
            LayerSpec::conv("gamma.conv1", w1, w1, 3),
            LayerSpec::conv("psi_v.conv", w1, d, 3),
            LayerSpec::fc("liveness.fc", d, 2),
            LayerSpec::conv("psi_rec.conv", w1, d, 3),
            LayerSpec::fc("rec.fc", d, self.cfg.identity_count),
            LayerSpec::conv("psi_m.conv", w1, d, 3),
            LayerSpec::fc("mat_g.fc", d, GENERAL_MATERIAL_CLASSES),
            LayerSpec::fc("mat_v.fc", d, SPOOF_MATERIAL_CLASSES),
        ];
        specs.extend(self.hg_depth.layer_specs());
        specs.extend(self.hg_refl.layer_specs());
        for ch in ChannelId::ALL {
            specs.push(LayerSpec::fc(
                &format!("var.{}.fc1", ch.key()),
                d,
                self.var_hidden,
            ));
            specs.push(LayerSpec::fc(
                &format!("var.{}.fc2", ch.key()),
                self.var_hidden,
                1,
            ));
        }
        specs
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamStore> {
        init_params(rng, &self.layer_specs())
    }

    /// Shared encoder: image [3, H, W] -> feature [C, H/4, W/4].
    pub fn encode(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let want: &[usize] = &self.cfg.image_shape;
        if image.shape() != want {
            return Err(FasError::Dim {
                op: "encode",
                detail: format!("expected image {want:?}, got {:?}", image.shape()),
            });
        }
        // per-sample standardization removes the global photometric gain
        // a capture domain multiplies onto the image
        let image = image.standardize();
        let h1 = conv_forward(params, "phi.conv1", &image, 1, 1)?
            .relu()
            .avg_pool2x2()?;
        let h2 = conv_forward(params, "phi.conv2", &h1, 1, 1)?
            .relu()
            .avg_pool2x2()?;
        Ok(h2)
    }

    /// Transfer module: adapts the shared feature for the proxy heads,
    /// preserving spatial extent.
    pub fn transfer(&self, params: &ParamStore, shared: &Tensor) -> Result<Tensor> {
        let [_, h, w] = self.cfg.image_shape;
        let want = [self.cfg.encoder_widths[1], h / 4, w / 4];
        if shared.shape() != want {
            return Err(FasError::Dim {
                op: "transfer",
                detail: format!("expected shared feature {want:?}, got {:?}", shared.shape()),
            });
        }
        Ok(conv_forward(params, "gamma.conv1", shared, 1, 1)?.relu())
    }

    fn head_feature(&self, params: &ParamStore, conv: &str, input: &Tensor) -> Result<Tensor> {
        conv_forward(params, conv, input, 1, 1)?
            .relu()
            .mean_groups(self.cfg.feature_dim)
    }

    /// Variance head sigma_u = softplus(FC2(relu(FC1(u)))) + eps. Spatial
    /// maps are mean-pooled down to D dims before FC1.
    pub fn variance_head(&self, params: &ParamStore, id: ChannelId, u: &Tensor) -> Result<Tensor> {
        let d = self.cfg.feature_dim;
        let pooled = if u.shape() == [d] {
            u.clone()
        } else {
            if !u.numel().is_multiple_of(d) {
                return Err(FasError::Dim {
                    op: "variance_head",
                    detail: format!(
                        "channel feature {:?} does not pool into {d} groups",
                        u.shape()
                    ),
                });
            }
            u.mean_groups(d)?
        };
        let key = id.key();
        let h = fc_forward(params, &format!("var.{key}.fc1"), &pooled)?.relu();
        let out = fc_forward(params, &format!("var.{key}.fc2"), &h)?;
        Ok(out.softplus().add_scalar(SIGMA_EPS))
    }

    /// Forward through the heads selected by `mask`.
    pub fn forward_masked(
        &self,
        params: &ParamStore,
        image: &Tensor,
        mask: HeadMask,
    ) -> Result<PartialBundle> {
        let shared = self.encode(params, image)?;
        let mut out = PartialBundle {
            phi_pooled: Some(shared.mean_groups(self.cfg.encoder_widths[1])?),
            ..Default::default()
        };

        let needs_transfer = mask.depth
            || mask.reflection
            || mask.material
            || (mask.liveness && self.cfg.liveness_via_transfer);
        let transferred = if needs_transfer {
            Some(self.transfer(params, &shared)?)
        } else {
            None
        };

        if mask.liveness {
            let src = if self.cfg.liveness_via_transfer {
                transferred.as_ref().expect("transfer computed")
            } else {
                &shared
            };
            let z = self.head_feature(params, "psi_v.conv", src)?;
            out.liveness_logits = Some(fc_forward(params, "liveness.fc", &z)?);
            out.z = Some(z);
        }
        if mask.recognition {
            let zr = self.head_feature(params, "psi_rec.conv", &shared)?;
            out.id_logits = Some(fc_forward(params, "rec.fc", &zr)?);
        }
        if mask.depth {
            out.d = Some(
                self.hg_depth
                    .forward(params, transferred.as_ref().expect("transfer"))?,
            );
        }
        if mask.reflection {
            out.r = Some(
                self.hg_refl
                    .forward(params, transferred.as_ref().expect("transfer"))?,
            );
        }
        if mask.material {
            let f = self.head_feature(
                params,
                "psi_m.conv",
                transferred.as_ref().expect("transfer"),
            )?;
            out.material_logits_general = Some(fc_forward(params, "mat_g.fc", &f)?);
            out.material_logits_spoof = Some(fc_forward(params, "mat_v.fc", &f)?);
            out.f = Some(f);
        }
        if mask.sigma {
            let need = |t: &Option<Tensor>, what: &str| -> Result<Tensor> {
                t.clone().ok_or_else(|| {
                    FasError::Contract(format!("sigma requested without the {what} head"))
                })
            };
            out.sigma = Some(ChannelSigmas {
                z: self.variance_head(params, ChannelId::Z, &need(&out.z, "liveness")?)?,
                d: self.variance_head(params, ChannelId::D, &need(&out.d, "depth")?)?,
                r: self.variance_head(params, ChannelId::R, &need(&out.r, "reflection")?)?,
                f: self.variance_head(params, ChannelId::F, &need(&out.f, "material")?)?,
            });
        }
        Ok(out)
    }

    /// Forward through every head. With `sigma_enabled` false (stage 1)
    /// the variance fields carry the placeholder 1.0 exactly.
    pub fn forward_all(
        &self,
        params: &ParamStore,
        image: &Tensor,
        sigma_enabled: bool,
    ) -> Result<ChannelBundle> {
        let partial = self.forward_masked(params, image, HeadMask::all(sigma_enabled))?;
        let sigma = match partial.sigma {
            Some(s) => s,
            None => ChannelSigmas {
                z: Tensor::scalar(1.0),
                d: Tensor::scalar(1.0),
                r: Tensor::scalar(1.0),
                f: Tensor::scalar(1.0),
            },
        };
        Ok(ChannelBundle {
            z: partial.z.expect("liveness head"),
            liveness_logits: partial.liveness_logits.expect("liveness head"),
            d: partial.d.expect("depth head"),
            r: partial.r.expect("reflection head"),
            f: partial.f.expect("material head"),
            material_logits_general: partial.material_logits_general.expect("material head"),
            material_logits_spoof: partial.material_logits_spoof.expect("material head"),
            id_logits: partial.id_logits.expect("recognition head"),
            sigma,
        })
    }

    /// Mean-pooled shared-encoder embedding used by the triplet losses.
    pub fn phi_embedding(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        self.encode(params, image)?
            .mean_groups(self.cfg.encoder_widths[1])
    }

    /// Depth map from an (optionally perturbed) transfer feature.
    pub fn depth_head(&self, params: &ParamStore, transferred: &Tensor) -> Result<Tensor> {
        self.hg_depth.forward(params, transferred)
    }

    /// Reflection map from an (optionally perturbed) transfer feature.
    pub fn reflection_head(&self, params: &ParamStore, transferred: &Tensor) -> Result<Tensor> {
        self.hg_refl.forward(params, transferred)
    }
}
