//! Forward implementations. Each op validates shapes, computes the value
//! buffer and records an `Op` node for the backward pass.

use super::{Op, Tensor};
use crate::error::{FasError, Result};

fn dim_err(op: &'static str, detail: String) -> FasError {
    FasError::Dim { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(
            op,
            format!("left {:?} vs right {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Row-major matrix product into a fresh buffer: a[m,k] * b[k,n].
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Output extent of a 1-D convolution axis, or an error when the
/// stride does not evenly tile the padded extent.
fn conv_extent(
    op: &'static str,
    size: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = size + 2 * padding;
    if k > padded {
        return Err(dim_err(
            op,
            format!("kernel {k} exceeds padded extent {padded}"),
        ));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(dim_err(
            op,
            format!("non-integral output extent: ({size}+2*{padding}-{k}) not divisible by stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Copy a CHW tensor into a zero-padded buffer.
pub(crate) fn pad_chw(data: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return data.to_vec();
    }
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &data[ch * h * w + y * w..ch * h * w + y * w + w];
            let dst_off = ch * ph * pw + (y + p) * pw + p;
            out[dst_off..dst_off + w].copy_from_slice(src);
        }
    }
    out
}

/// Unfolds a padded CHW input into the [c*k*k, oh*ow] patch matrix so
/// convolution becomes one matrix product over long contiguous rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    padded: &[f64],
    c: usize,
    ph: usize,
    pw: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * oh * ow];
    let mut row = 0;
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let dst_base = row * oh * ow;
                for y in 0..oh {
                    let src = ic * ph * pw + (y * stride + ky) * pw + kx;
                    let dst = dst_base + y * ow;
                    if stride == 1 {
                        cols[dst..dst + ow].copy_from_slice(&padded[src..src + ow]);
                    } else {
                        for x in 0..ow {
                            cols[dst + x] = padded[src + x * stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_raw(
    input: &[f64],
    kernels: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let padded = pad_chw(input, c, h, w, padding);
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let cols = im2col(&padded, c, ph, pw, k, stride, oh, ow);
    // kernels are [o, c, k, k] row-major, exactly the [o, c*k*k] matrix
    matmul_raw(kernels, &cols, o, c * k * k, oh * ow)
}

impl Tensor {
    pub(crate) const STANDARDIZE_EPS: f64 = 1e-8;

    fn unary(&self, op: Op, data: Vec<f64>) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), data, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.unary(Op::Add(self.clone(), other.clone()), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(self.unary(Op::Sub(self.clone(), other.clone()), data))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(self.unary(Op::Mul(self.clone(), other.clone()), data))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        Ok(self.unary(Op::Div(self.clone(), other.clone()), data))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        self.unary(Op::AddScalar(self.clone()), data)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        self.unary(Op::MulScalar(self.clone(), c), data)
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|v| -v).collect();
        self.unary(Op::Neg(self.clone()), data)
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        self.unary(Op::Relu(self.clone()), data)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.unary(Op::Sigmoid(self.clone()), data)
    }

    /// softplus(x) = ln(1 + e^x), computed in its stable branch form.
    pub fn softplus(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    v + (-v).exp().ln_1p()
                } else {
                    v.exp().ln_1p()
                }
            })
            .collect();
        self.unary(Op::Softplus(self.clone()), data)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.exp()).collect();
        self.unary(Op::Exp(self.clone()), data)
    }

    pub fn log(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.ln()).collect();
        self.unary(Op::Log(self.clone()), data)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.abs()).collect();
        self.unary(Op::Abs(self.clone()), data)
    }

    /// Matrix product a[M,K] * b[K,N] -> [M,N].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err(
                "matmul",
                format!("expected two matrices, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("inner dimensions differ: {sa:?} vs {sb:?}"),
            ));
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                m,
                k,
                n,
            },
        ))
    }

    /// Matrix-vector product a[M,K] * x[K] -> [M].
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        let (sa, sx) = (self.shape(), x.shape());
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(dim_err(
                "matvec",
                format!("expected [M,K] by [K], got {sa:?} and {sx:?}"),
            ));
        }
        let (m, k) = (sa[0], sa[1]);
        let a = self.data();
        let xv = x.data();
        let data: Vec<f64> = (0..m)
            .map(|i| {
                a[i * k..(i + 1) * k]
                    .iter()
                    .zip(xv)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect();
        Ok(Tensor::from_op(
            vec![m],
            data,
            Op::MatVec {
                a: self.clone(),
                x: x.clone(),
                m,
                k,
            },
        ))
    }

    /// Cross-correlation (deep-learning convention, no kernel flip) of a
    /// CHW input with OCkk kernels.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (si, sk) = (self.shape(), kernels.shape());
        if si.len() != 3 || sk.len() != 4 {
            return Err(dim_err(
                "conv2d",
                format!("expected CHW input and OCkk kernels, got {si:?} and {sk:?}"),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive".into()));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c || kh != kw {
            return Err(dim_err(
                "conv2d",
                format!("kernels {sk:?} incompatible with input {si:?} (need square kernels, matching channels)"),
            ));
        }
        let oh = conv_extent("conv2d", h, kh, stride, padding)?;
        let ow = conv_extent("conv2d", w, kw, stride, padding)?;
        let data = conv2d_raw(
            self.data(),
            kernels.data(),
            c,
            h,
            w,
            o,
            kh,
            stride,
            padding,
            oh,
            ow,
        );
        Ok(Tensor::from_op(
            vec![o, oh, ow],
            data,
            Op::Conv2d {
                input: self.clone(),
                kernels: kernels.clone(),
                stride,
                padding,
            },
        ))
    }

    /// Adds bias[c] to every spatial position of channel c.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (si, sb) = (self.shape(), bias.shape());
        if si.len() != 3 || sb.len() != 1 || sb[0] != si[0] {
            return Err(dim_err(
                "add_channel_bias",
                format!("input {si:?} vs bias {sb:?}"),
            ));
        }
        let hw = si[1] * si[2];
        let mut data = self.data().to_vec();
        for (ch, &b) in bias.data().iter().enumerate() {
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                *v += b;
            }
        }
        Ok(Tensor::from_op(
            si.to_vec(),
            data,
            Op::AddChannelBias {
                x: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    fn softmax_values(&self) -> Result<Vec<f64>> {
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(FasError::Numeric("softmax input must be finite".into()));
        }
        let max = self
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.data().iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / sum).collect())
    }

    /// Probability simplex over a 1-D logit vector, max-subtracted for
    /// stability.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.shape().len() != 1 || self.numel() < 2 {
            return Err(dim_err(
                "softmax",
                format!("expected 1-D logits of length >= 2, got {:?}", self.shape()),
            ));
        }
        let data = self.softmax_values()?;
        Ok(self.unary(Op::Softmax(self.clone()), data))
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        if self.shape().len() != 1 || self.numel() < 2 {
            return Err(dim_err(
                "log_softmax",
                format!("expected 1-D logits of length >= 2, got {:?}", self.shape()),
            ));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(FasError::Numeric("log_softmax input must be finite".into()));
        }
        let max = self
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let log_sum = self
            .data()
            .iter()
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
        let data = self.data().iter().map(|v| v - max - log_sum).collect();
        Ok(self.unary(Op::LogSoftmax(self.clone()), data))
    }

    /// Selects element `idx` of a 1-D tensor as a scalar tensor.
    pub fn index(&self, idx: usize) -> Result<Tensor> {
        if self.shape().len() != 1 || idx >= self.numel() {
            return Err(dim_err(
                "index",
                format!("index {idx} into shape {:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            vec![1],
            vec![self.data()[idx]],
            Op::Index {
                x: self.clone(),
                idx,
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s / self.numel() as f64],
            Op::Mean(self.clone()),
        )
    }

    /// Means of `groups` equal contiguous chunks -> [groups]. With a CHW
    /// tensor and groups = C this is global average pooling.
    pub fn mean_groups(&self, groups: usize) -> Result<Tensor> {
        if groups == 0 || !self.numel().is_multiple_of(groups) {
            return Err(dim_err(
                "mean_groups",
                format!(
                    "{} elements do not split into {groups} groups",
                    self.numel()
                ),
            ));
        }
        let chunk = self.numel() / groups;
        let data: Vec<f64> = self
            .data()
            .chunks_exact(chunk)
            .map(|c| c.iter().sum::<f64>() / chunk as f64)
            .collect();
        Ok(Tensor::from_op(
            vec![groups],
            data,
            Op::MeanGroups {
                x: self.clone(),
                groups,
            },
        ))
    }

    /// Nearest-neighbor 2x spatial upsample of a CHW tensor.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(dim_err("upsample2x", format!("expected CHW, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = self.data()[ch * h * w + y * w + x];
                    let base = ch * oh * ow + 2 * y * ow + 2 * x;
                    data[base] = v;
                    data[base + 1] = v;
                    data[base + ow] = v;
                    data[base + ow + 1] = v;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            data,
            Op::Upsample2x(self.clone()),
        ))
    }

    /// 2x2 average-pool downsample of a CHW tensor with even extents.
    pub fn avg_pool2x2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(dim_err(
                "avg_pool2x2",
                format!("expected CHW with even spatial extents, got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    let d = self.data();
                    data[ch * oh * ow + y * ow + x] =
                        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            data,
            Op::AvgPool2x2(self.clone()),
        ))
    }

    /// Per-tensor standardization: (x - mean) / sqrt(var + 1e-8), with
    /// population variance over every element.
    pub fn standardize(&self) -> Tensor {
        let n = self.numel() as f64;
        let mean: f64 = self.data().iter().sum::<f64>() / n;
        let var: f64 = self
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let s = (var + Self::STANDARDIZE_EPS).sqrt();
        let data = self.data().iter().map(|v| (v - mean) / s).collect();
        self.unary(Op::Standardize(self.clone()), data)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(dim_err(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Concatenates two CHW tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(dim_err(
                "concat_channels",
                format!("spatial shapes differ: {sa:?} vs {sb:?}"),
            ));
        }
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        data.extend_from_slice(self.data());
        data.extend_from_slice(other.data());
        Ok(Tensor::from_op(
            vec![sa[0] + sb[0], sa[1], sa[2]],
            data,
            Op::ConcatChannels {
                a: self.clone(),
                b: other.clone(),
                a_ch: sa[0],
            },
        ))
    }

    /// Sum of squared differences: ||a - b||^2 as a scalar tensor.
    pub fn sq_dist(&self, other: &Tensor) -> Result<Tensor> {
        let d = self.sub(other)?;
        Ok(d.mul(&d)?.sum())
    }
}
