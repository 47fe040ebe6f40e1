//! Reverse-mode gradient propagation over the recorded graph.

use std::collections::HashSet;
use std::rc::Rc;

use super::ops::{im2col, matmul_raw, pad_chw};
use super::{Inner, Op, Tensor};
use crate::error::{FasError, Result};

fn accumulate(target: &Tensor, contribution: &[f64]) {
    if !target.inner.tracked {
        return;
    }
    let mut slot = target.inner.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_at(target: &Tensor, idx: usize, v: f64) {
    if !target.inner.tracked {
        return;
    }
    let mut slot = target.inner.grad.borrow_mut();
    if slot.is_none() {
        *slot = Some(vec![0.0; target.numel()]);
    }
    slot.as_mut().expect("grad buffer")[idx] += v;
}

/// Post-order over the tracked subgraph: parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Inner> = HashSet::new();
    // (node, children_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        let ptr = Rc::as_ptr(&node.inner);
        if visited.contains(&ptr) || !node.inner.tracked {
            continue;
        }
        visited.insert(ptr);
        stack.push((node.clone(), true));
        for p in node.inner.op.parents() {
            stack.push((p.clone(), false));
        }
    }
    order
}

impl Tensor {
    /// Backpropagates from a scalar output, accumulating gradients into
    /// every tracked node reachable from it. Repeated leaves accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(FasError::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.tracked {
            return Err(FasError::Contract(
                "backward on an untracked tensor (no graph recorded)".into(),
            ));
        }
        accumulate(self, &[1.0]);
        let order = topo_order(self);
        for node in order.iter().rev() {
            let grad = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            propagate(node, &grad);
        }
        Ok(())
    }
}

fn propagate(node: &Tensor, g: &[f64]) {
    match &node.inner.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(a, g);
            accumulate(b, g);
        }
        Op::Sub(a, b) => {
            accumulate(a, g);
            if b.inner.tracked {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(b, &neg);
            }
        }
        Op::Mul(a, b) => {
            if a.inner.tracked {
                let da: Vec<f64> = g.iter().zip(b.data()).map(|(gi, bv)| gi * bv).collect();
                accumulate(a, &da);
            }
            if b.inner.tracked {
                let db: Vec<f64> = g.iter().zip(a.data()).map(|(gi, av)| gi * av).collect();
                accumulate(b, &db);
            }
        }
        Op::Div(a, b) => {
            if a.inner.tracked {
                let da: Vec<f64> = g.iter().zip(b.data()).map(|(gi, bv)| gi / bv).collect();
                accumulate(a, &da);
            }
            if b.inner.tracked {
                let db: Vec<f64> = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(gi, (av, bv))| -gi * av / (bv * bv))
                    .collect();
                accumulate(b, &db);
            }
        }
        Op::AddScalar(x) => accumulate(x, g),
        Op::MulScalar(x, c) => {
            let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(x, &dx);
        }
        Op::Neg(x) => {
            let dx: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(x, &dx);
        }
        Op::Relu(x) => {
            let dx: Vec<f64> = g
                .iter()
                .zip(x.data())
                .map(|(gi, &xv)| if xv > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(x, &dx);
        }
        Op::Sigmoid(x) => {
            let dx: Vec<f64> = g
                .iter()
                .zip(node.data())
                .map(|(gi, &s)| gi * s * (1.0 - s))
                .collect();
            accumulate(x, &dx);
        }
        Op::Softplus(x) => {
            // d softplus / dx = sigmoid(x)
            let dx: Vec<f64> = g
                .iter()
                .zip(x.data())
                .map(|(gi, &xv)| gi / (1.0 + (-xv).exp()))
                .collect();
            accumulate(x, &dx);
        }
        Op::Exp(x) => {
            let dx: Vec<f64> = g.iter().zip(node.data()).map(|(gi, &e)| gi * e).collect();
            accumulate(x, &dx);
        }
        Op::Log(x) => {
            let dx: Vec<f64> = g.iter().zip(x.data()).map(|(gi, &xv)| gi / xv).collect();
            accumulate(x, &dx);
        }
        Op::Abs(x) => {
            let dx: Vec<f64> = g
                .iter()
                .zip(x.data())
                .map(|(gi, &xv)| gi * sign0(xv))
                .collect();
            accumulate(x, &dx);
        }
        Op::MatMul { a, b, m, k, n } => {
            if a.inner.tracked {
                // dA = dC * B^T
                let bt = transpose(b.data(), *k, *n);
                let da = matmul_raw(g, &bt, *m, *n, *k);
                accumulate(a, &da);
            }
            if b.inner.tracked {
                // dB = A^T * dC
                let at = transpose(a.data(), *m, *k);
                let db = matmul_raw(&at, g, *k, *m, *n);
                accumulate(b, &db);
            }
        }
        Op::MatVec { a, x, m, k } => {
            if a.inner.tracked {
                let mut da = vec![0.0; m * k];
                for (i, &gi) in g.iter().enumerate().take(*m) {
                    for (dv, xv) in da[i * k..(i + 1) * k].iter_mut().zip(x.data()) {
                        *dv += gi * xv;
                    }
                }
                accumulate(a, &da);
            }
            if x.inner.tracked {
                let mut dx = vec![0.0; *k];
                for (i, &gi) in g.iter().enumerate().take(*m) {
                    for (dv, av) in dx.iter_mut().zip(&a.data()[i * k..(i + 1) * k]) {
                        *dv += gi * av;
                    }
                }
                accumulate(x, &dx);
            }
        }
        Op::Conv2d {
            input,
            kernels,
            stride,
            padding,
        } => {
            conv2d_backward(node, input, kernels, *stride, *padding, g);
        }
        Op::AddChannelBias { x, bias } => {
            accumulate(x, g);
            if bias.inner.tracked {
                let hw = x.shape()[1] * x.shape()[2];
                let db: Vec<f64> = g.chunks_exact(hw).map(|c| c.iter().sum()).collect();
                accumulate(bias, &db);
            }
        }
        Op::Softmax(x) => {
            // dx = s ⊙ (g − <g, s>)
            let s = node.data();
            let dot: f64 = g.iter().zip(s).map(|(gi, si)| gi * si).sum();
            let dx: Vec<f64> = g.iter().zip(s).map(|(gi, si)| si * (gi - dot)).collect();
            accumulate(x, &dx);
        }
        Op::LogSoftmax(x) => {
            // dx = g − softmax(x) · Σg
            let gsum: f64 = g.iter().sum();
            let dx: Vec<f64> = g
                .iter()
                .zip(node.data())
                .map(|(gi, &ls)| gi - ls.exp() * gsum)
                .collect();
            accumulate(x, &dx);
        }
        Op::Index { x, idx } => accumulate_at(x, *idx, g[0]),
        Op::Sum(x) => {
            let dx = vec![g[0]; x.numel()];
            accumulate(x, &dx);
        }
        Op::Mean(x) => {
            let dx = vec![g[0] / x.numel() as f64; x.numel()];
            accumulate(x, &dx);
        }
        Op::MeanGroups { x, groups } => {
            let chunk = x.numel() / groups;
            let mut dx = vec![0.0; x.numel()];
            for (gi, dchunk) in g.iter().zip(dx.chunks_exact_mut(chunk)) {
                let v = gi / chunk as f64;
                for d in dchunk {
                    *d = v;
                }
            }
            accumulate(x, &dx);
        }
        Op::Upsample2x(x) => {
            let s = x.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let ow = 2 * w;
            let mut dx = vec![0.0; x.numel()];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let base = ch * 4 * h * w + 2 * y * ow + 2 * xx;
                        dx[ch * h * w + y * w + xx] =
                            g[base] + g[base + 1] + g[base + ow] + g[base + ow + 1];
                    }
                }
            }
            accumulate(x, &dx);
        }
        Op::AvgPool2x2(x) => {
            let s = x.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0; x.numel()];
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = 0.25 * g[ch * oh * ow + y * ow + xx];
                        let base = ch * h * w + 2 * y * w + 2 * xx;
                        dx[base] += v;
                        dx[base + 1] += v;
                        dx[base + w] += v;
                        dx[base + w + 1] += v;
                    }
                }
            }
            accumulate(x, &dx);
        }
        Op::Reshape(x) => accumulate(x, g),
        Op::Standardize(x) => {
            // y = (x - mu) / s with s^2 = var + eps:
            // dx = (g - mean(g) - y * mean(g .* y)) / s
            let n = x.numel() as f64;
            let mean: f64 = x.data().iter().sum::<f64>() / n;
            let var: f64 = x
                .data()
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n;
            let s = (var + Tensor::STANDARDIZE_EPS).sqrt();
            let y = node.data();
            let g_mean: f64 = g.iter().sum::<f64>() / n;
            let gy_mean: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum::<f64>() / n;
            let dx: Vec<f64> = g
                .iter()
                .zip(y)
                .map(|(gi, yi)| (gi - g_mean - yi * gy_mean) / s)
                .collect();
            accumulate(x, &dx);
        }
        Op::ConcatChannels { a, b, a_ch } => {
            let hw = node.shape()[1] * node.shape()[2];
            let split = a_ch * hw;
            accumulate(a, &g[..split]);
            accumulate(b, &g[split..]);
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

fn conv2d_backward(
    node: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    g: &[f64],
) {
    let si = input.shape();
    let sk = kernels.shape();
    let so = node.shape();
    let (c, h, w) = (si[0], si[1], si[2]);
    let (o, k) = (sk[0], sk[2]);
    let (oh, ow) = (so[1], so[2]);
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let ckk = c * k * k;
    let ohow = oh * ow;
    let want_input = input.inner.tracked;
    let want_kernels = kernels.inner.tracked;
    if !want_input && !want_kernels {
        return;
    }

    if want_kernels {
        // dK[o, ckk] = g[o, ohow] * cols[ckk, ohow]^T: row-dot products
        let padded_in = pad_chw(input.data(), c, h, w, padding);
        let cols = im2col(&padded_in, c, ph, pw, k, stride, oh, ow);
        let mut d_kernels = vec![0.0; kernels.numel()];
        for oc in 0..o {
            let grow = &g[oc * ohow..(oc + 1) * ohow];
            let drow = &mut d_kernels[oc * ckk..(oc + 1) * ckk];
            for (j, dv) in drow.iter_mut().enumerate() {
                let crow = &cols[j * ohow..(j + 1) * ohow];
                *dv = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
            }
        }
        accumulate(kernels, &d_kernels);
    }

    if want_input {
        // dCols[ckk, ohow] = K[o, ckk]^T * g[o, ohow], then fold the patch
        // matrix back onto the padded input grid
        let mut d_cols = vec![0.0; ckk * ohow];
        let kdata = kernels.data();
        for oc in 0..o {
            let grow = &g[oc * ohow..(oc + 1) * ohow];
            for j in 0..ckk {
                let kv = kdata[oc * ckk + j];
                if kv == 0.0 {
                    continue;
                }
                let drow = &mut d_cols[j * ohow..(j + 1) * ohow];
                for (dv, &gv) in drow.iter_mut().zip(grow) {
                    *dv += kv * gv;
                }
            }
        }
        let mut d_padded = vec![0.0; c * ph * pw];
        let mut row = 0;
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let src_base = row * ohow;
                    for y in 0..oh {
                        let dst = ic * ph * pw + (y * stride + ky) * pw + kx;
                        let src = src_base + y * ow;
                        if stride == 1 {
                            let srow = &d_cols[src..src + ow];
                            let drow = &mut d_padded[dst..dst + ow];
                            for (d, &s) in drow.iter_mut().zip(srow) {
                                *d += s;
                            }
                        } else {
                            for x in 0..ow {
                                d_padded[dst + x * stride] += d_cols[src + x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        if padding == 0 {
            accumulate(input, &d_padded);
        } else {
            let mut d_in = vec![0.0; input.numel()];
            for ch in 0..c {
                for y in 0..h {
                    let src = ch * ph * pw + (y + padding) * pw + padding;
                    let dst = ch * h * w + y * w;
                    d_in[dst..dst + w].copy_from_slice(&d_padded[src..src + w]);
                }
            }
            accumulate(input, &d_in);
        }
    }
}
