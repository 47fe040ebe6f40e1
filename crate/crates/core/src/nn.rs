//! Parameterized layers, the hourglass map decoder, weight initialization
//! and the Adam optimizer.
//!
//! Parameters are tracked leaf tensors held in a `ParamStore` keyed by
//! name. The optimizer replaces parameter tensors with fresh leaves on
//! every step, which both clears gradients and keeps tensor values
//! immutable; the next forward pass picks up the new leaves.

use std::collections::HashMap;

use crate::error::{FasError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Shape declaration for one parameterized layer.
#[derive(Debug, Clone)]
pub enum LayerSpec {
    /// 2-D convolution: weight [out, in, k, k], bias [out].
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    },
    /// Fully connected: weight [out, in], bias [out].
    Fc {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
}

impl LayerSpec {
    pub fn conv(name: &str, in_ch: usize, out_ch: usize, k: usize) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            in_ch,
            out_ch,
            k,
        }
    }

    pub fn fc(name: &str, in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Fc {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }
}

/// Ordered, uniquely named map of parameter tensors. Iteration follows
/// creation order, so runs with the same construction sequence see the
/// same parameter order everywhere (init, optimizer, checkpoints).
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(FasError::Contract(format!(
                "duplicate parameter name: {name}"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| FasError::Contract(format!("unknown parameter: {name}")))
    }

    /// Replaces a parameter's values with a fresh tracked leaf of the
    /// same shape. Old gradient state is dropped with the old leaf.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| FasError::Contract(format!("unknown parameter: {name}")))?;
        let shape = self.entries[i].1.shape().to_vec();
        if data.len() != self.entries[i].1.numel() {
            return Err(FasError::Dim {
                op: "set_data",
                detail: format!(
                    "parameter {name} has shape {shape:?}, got {} values",
                    data.len()
                ),
            });
        }
        self.entries[i].1 = Tensor::leaf(&shape, data)?;
        Ok(())
    }

    /// Substitutes an existing tensor for a parameter, preserving shape.
    /// Lets gradient checks route a probe leaf through a forward pass.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| FasError::Contract(format!("unknown parameter: {name}")))?;
        if tensor.shape() != self.entries[i].1.shape() {
            return Err(FasError::Dim {
                op: "set_tensor",
                detail: format!(
                    "parameter {name} has shape {:?}, got {:?}",
                    self.entries[i].1.shape(),
                    tensor.shape()
                ),
            });
        }
        self.entries[i].1 = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn clear_grads(&self) {
        for (_, t) in &self.entries {
            t.clear_grad();
        }
    }

    /// Deep copy with fresh tracked leaves carrying the same values.
    pub fn clone_values(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in &self.entries {
            out.insert(name, t.detach_tracked()).expect("unique names");
        }
        out
    }
}

/// He-normal initialization: weights ~ N(0, 2/fan_in), biases zero.
/// fan_in is in_ch * k * k for convolutions and in_dim for FC layers.
pub fn init_params(rng: &mut Rng, specs: &[LayerSpec]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for spec in specs {
        match spec {
            LayerSpec::Conv {
                name,
                in_ch,
                out_ch,
                k,
            } => {
                let fan_in = in_ch * k * k;
                let std = (2.0 / fan_in as f64).sqrt();
                let w = rng
                    .normal_tensor(&[*out_ch, *in_ch, *k, *k])?
                    .mul_scalar(std)
                    .detach_tracked();
                store.insert(&format!("{name}.w"), w)?;
                store.insert(
                    &format!("{name}.b"),
                    Tensor::leaf(&[*out_ch], vec![0.0; *out_ch])?,
                )?;
            }
            LayerSpec::Fc {
                name,
                in_dim,
                out_dim,
            } => {
                let std = (2.0 / *in_dim as f64).sqrt();
                let w = rng
                    .normal_tensor(&[*out_dim, *in_dim])?
                    .mul_scalar(std)
                    .detach_tracked();
                store.insert(&format!("{name}.w"), w)?;
                store.insert(
                    &format!("{name}.b"),
                    Tensor::leaf(&[*out_dim], vec![0.0; *out_dim])?,
                )?;
            }
        }
    }
    Ok(store)
}

/// Convolution layer forward: conv2d + channel bias.
pub fn conv_forward(
    params: &ParamStore,
    name: &str,
    x: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    x.conv2d(w, stride, padding)?.add_channel_bias(b)
}

/// FC layer forward: weight [out, in] times x [in], plus bias.
pub fn fc_forward(params: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    w.matvec(x)?.add(b)
}

/// Hourglass map decoder. Two pooling stages down to a bottleneck,
/// mirrored back up with one skip connection, then `extra_up` further
/// upsampling stages to the target map resolution; final sigmoid.
#[derive(Debug, Clone)]
pub struct Hourglass {
    pub prefix: String,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub up_ch: usize,
    pub extra_up: usize,
}

impl Hourglass {
    pub fn new(prefix: &str, in_ch: usize, mid_ch: usize, up_ch: usize, extra_up: usize) -> Self {
        Hourglass {
            prefix: prefix.into(),
            in_ch,
            mid_ch,
            up_ch,
            extra_up,
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let p = &self.prefix;
        let mut specs = vec![
            LayerSpec::conv(&format!("{p}.enc1"), self.in_ch, self.mid_ch, 3),
            LayerSpec::conv(&format!("{p}.enc2"), self.mid_ch, self.mid_ch, 3),
            LayerSpec::conv(&format!("{p}.mid"), self.mid_ch, self.mid_ch, 3),
            LayerSpec::conv(&format!("{p}.dec1"), self.mid_ch, self.mid_ch, 3),
            // dec2 consumes the upsampled decoder state concatenated with
            // the enc1 skip feature.
            LayerSpec::conv(&format!("{p}.dec2"), 2 * self.mid_ch, self.mid_ch, 3),
        ];
        let mut ch = self.mid_ch;
        for i in 0..self.extra_up {
            specs.push(LayerSpec::conv(&format!("{p}.up{i}"), ch, self.up_ch, 3));
            ch = self.up_ch;
        }
        specs.push(LayerSpec::conv(&format!("{p}.out"), ch, 1, 3));
        specs
    }

    /// feature [C, H, W] -> map [1, H * 2^extra_up, W * 2^extra_up],
    /// values in (0, 1).
    pub fn forward(&self, params: &ParamStore, feature: &Tensor) -> Result<Tensor> {
        let s = feature.shape();
        if s.len() != 3 || s[0] != self.in_ch {
            return Err(FasError::Dim {
                op: "hourglass",
                detail: format!("expected [{}, H, W] feature, got {s:?}", self.in_ch),
            });
        }
        if !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) || s[1] < 4 || s[2] < 4 {
            return Err(FasError::Dim {
                op: "hourglass",
                detail: format!("spatial extents must be multiples of 4 and >= 4, got {s:?}"),
            });
        }
        let p = &self.prefix;
        let skip = conv_forward(params, &format!("{p}.enc1"), feature, 1, 1)?.relu();
        let down1 = skip.avg_pool2x2()?;
        let enc2 = conv_forward(params, &format!("{p}.enc2"), &down1, 1, 1)?.relu();
        let down2 = enc2.avg_pool2x2()?;
        let mid = conv_forward(params, &format!("{p}.mid"), &down2, 1, 1)?.relu();
        let up1 = conv_forward(params, &format!("{p}.dec1"), &mid.upsample2x()?, 1, 1)?.relu();
        let merged = up1.upsample2x()?.concat_channels(&skip)?;
        let mut state = conv_forward(params, &format!("{p}.dec2"), &merged, 1, 1)?.relu();
        for i in 0..self.extra_up {
            state = conv_forward(params, &format!("{p}.up{i}"), &state.upsample2x()?, 1, 1)?.relu();
        }
        // per-sample standardization before the out conv keeps the
        // decoder in the sigmoid's responsive range; the mostly-zero map
        // targets would otherwise drive the shared weights into
        // saturation under the L1 objective
        state = state.standardize();
        Ok(conv_forward(params, &format!("{p}.out"), &state, 1, 1)?.sigmoid())
    }
}

/// Adam with bias correction and zero weight decay. Moment buffers are
/// keyed by parameter name and created lazily.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moment buffers for a parameter, if any step touched it yet.
    pub fn moments(&self, name: &str) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.moments.get(name)
    }

    pub fn restore_state(&mut self, t: u64, moments: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.t = t;
        self.moments = moments.into_iter().map(|(n, m, v)| (n, (m, v))).collect();
    }

    /// One update over every parameter.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.step_filtered(params, |_| true)
    }

    /// One update over the parameters selected by `active`. Every selected
    /// parameter must carry a gradient. Gradients are cleared afterwards.
    pub fn step_filtered<F>(&mut self, params: &mut ParamStore, active: F) -> Result<()>
    where
        F: Fn(&str) -> bool,
    {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params
            .names()
            .filter(|n| active(n))
            .map(String::from)
            .collect();
        let mut updates: Vec<(String, Vec<f64>)> = Vec::with_capacity(names.len());
        for name in &names {
            let p = params.get(name)?;
            let grad = p.grad().ok_or_else(|| {
                FasError::Contract(format!("adam step: parameter {name} has no gradient"))
            })?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let mut new_data = p.data().to_vec();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                new_data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            updates.push((name.clone(), new_data));
        }
        for (name, data) in updates {
            params.set_data(&name, data)?;
        }
        params.clear_grads();
        Ok(())
    }
}
