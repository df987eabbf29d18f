//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Graph` records operations in topological order during the forward
//! pass and replays them in reverse to accumulate gradients. The tape is
//! rebuilt for every forward pass; there is no graph reuse. The op set is
//! deliberately small: exactly what the blind-spot networks, the noise
//! estimator and the likelihood losses need.
//!
//! Convolutions use zero padding and keep the spatial size. Gradients flow
//! to inputs and kernels, never to masks.

use crate::error::{Error, Result};
use crate::spd::{self, SymMat, EPS_PSD};
use crate::tensor::Tensor;

pub type NodeId = usize;

const LN_2: f64 = std::f64::consts::LN_2;

/// Shifted softplus: ln(1 + e^x) - ln 2. Maps 0 to 0, so all-zero head
/// outputs reconstruct exactly the eps_psd-scaled identity covariance.
pub fn shifted_softplus(x: f64) -> f64 {
    softplus(x) - LN_2
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum with a fixed pairwise reduction tree. Deterministic regardless of
/// how the buffer was filled, and more accurate than a running sum.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Same-size zero-padded correlation with optional binary kernel mask.
    Conv2d { input: NodeId, kernel: NodeId, dilation: usize, mask: Option<Tensor> },
    /// Per-channel bias broadcast over the spatial plane.
    BiasAdd { input: NodeId, bias: NodeId },
    Relu { input: NodeId },
    ConcatChannels { inputs: Vec<NodeId> },
    SliceChannels { input: NodeId, start: usize, len: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    Sum { input: NodeId },
    /// Raw head planes -> SPD covariance planes via L L^T + eps_psd I,
    /// with the diagonal of L passed through the shifted softplus.
    SpdHead { raw: NodeId, channels: usize },
    /// Mean over valid pixels of the constrained negative log-likelihood
    /// 1/2 { eps^T (S_mu + S_n)^-1 eps + log|S_n| + tr(S_n^-1 S_mu) }.
    GaussianNll {
        observed: Tensor,
        mu: NodeId,
        sigma_n: NodeId,
        sigma_mu: NodeId,
        valid: Vec<bool>,
        channels: usize,
    },
    /// Sum of squared differences (squared Frobenius distance).
    SumSqDiff { a: NodeId, b: NodeId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Gradient is accumulated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    /// Registers a leaf that participates in gradients.
    pub fn param(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.requires_grad())
    }

    /// Registers a constant leaf (no gradient).
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].tensor
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert!(self.nodes[id].tensor.is_scalar());
        self.nodes[id].tensor.data()[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { tensor, op });
        self.nodes.len() - 1
    }

    fn any_requires_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tensor.requires_grad)
    }

    fn result(&mut self, mut tensor: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        tensor.requires_grad = self.any_requires_grad(inputs);
        self.push(tensor, op)
    }

    // ── Forward operations ──────────────────────────────────────────

    /// Zero-padded, same-size dilated correlation.
    ///
    /// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, k, k]` with odd
    /// k. A `mask` of shape `[k, k]` with entries in {0, 1} is applied to
    /// the kernel elementwise; masked taps contribute nothing and receive
    /// zero kernel gradient.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        dilation: usize,
        mask: Option<&Tensor>,
    ) -> Result<NodeId> {
        let x = &self.nodes[input].tensor;
        let w = &self.nodes[kernel].tensor;
        let (c_in, h, wd) = x.chw()?;
        let ks = w.shape();
        if ks.len() != 4 {
            return Err(Error::shape(format!("kernel must be rank 4, got {ks:?}")));
        }
        let (c_out, kc, k, k2) = (ks[0], ks[1], ks[2], ks[3]);
        if k != k2 {
            return Err(Error::shape(format!("kernel window must be square, got {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {k}")));
        }
        if kc != c_in {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, tensor has {c_in}"
            )));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be positive"));
        }
        if let Some(m) = mask {
            if m.shape() != [k, k] {
                return Err(Error::shape(format!(
                    "mask shape {:?} does not match kernel window {k}x{k}",
                    m.shape()
                )));
            }
        }
        let out = conv2d_forward(x, w, dilation, mask, c_out, c_in, h, wd, k);
        Ok(self.result(
            out,
            Op::Conv2d { input, kernel, dilation, mask: mask.cloned() },
            &[input, kernel],
        ))
    }

    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input].tensor;
        let b = &self.nodes[bias].tensor;
        let (c, h, w) = x.chw()?;
        if b.shape() != [c] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {c} channels",
                b.shape()
            )));
        }
        let mut out = x.clone();
        out.grad = None;
        for ch in 0..c {
            let bv = b.data()[ch];
            for v in &mut out.plane_mut(ch)[..h * w] {
                *v += bv;
            }
        }
        Ok(self.result(out, Op::BiasAdd { input, bias }, &[input, bias]))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input].tensor.map(|v| v.max(0.0));
        self.result(out, Op::Relu { input }, &[input])
    }

    /// Stacks rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let (_, h, w) = self.nodes[inputs[0]].tensor.chw()?;
        let mut total_c = 0;
        for &id in inputs {
            let (c, hh, ww) = self.nodes[id].tensor.chw()?;
            if (hh, ww) != (h, w) {
                return Err(Error::shape(format!(
                    "concat spatial mismatch: {h}x{w} vs {hh}x{ww}"
                )));
            }
            total_c += c;
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &id in inputs {
            data.extend_from_slice(self.nodes[id].tensor.data());
        }
        let out = Tensor::new(vec![total_c, h, w], data)?;
        Ok(self.result(out, Op::ConcatChannels { inputs: inputs.to_vec() }, inputs))
    }

    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = &self.nodes[input].tensor;
        let (c, h, w) = x.chw()?;
        if start + len > c {
            return Err(Error::shape(format!(
                "slice [{start}..{}] out of {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let data = x.data()[start * hw..(start + len) * hw].to_vec();
        let out = Tensor::new(vec![len, h, w], data)?;
        Ok(self.result(out, Op::SliceChannels { input, start, len }, &[input]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    fn zip_op(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let ta = &self.nodes[a].tensor;
        let tb = &self.nodes[b].tensor;
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elementwise op shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.result(out, op, &[a, b]))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out = self.nodes[input].tensor.map(|v| v * factor);
        self.result(out, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = pairwise_sum(self.nodes[input].tensor.data());
        self.result(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// Sum of squared elementwise differences, the building block of the
    /// distillation loss.
    pub fn sum_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].tensor;
        let tb = &self.nodes[b].tensor;
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "sum_sq_diff shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let sq: Vec<f64> =
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).collect();
        let s = pairwise_sum(&sq);
        Ok(self.result(Tensor::scalar(s), Op::SumSqDiff { a, b }, &[a, b]))
    }

    /// Maps raw head channels to SPD covariance planes.
    ///
    /// `raw` has `C*(C+1)/2` planes holding a lower-triangular factor L in
    /// row order; diagonal entries pass through the shifted softplus. The
    /// output planes hold `L L^T + eps_psd I` per pixel.
    pub fn spd_head(&mut self, raw: NodeId, channels: usize) -> Result<NodeId> {
        let t = &self.nodes[raw].tensor;
        let (p, h, w) = t.chw()?;
        if p != spd::tri_len(channels) {
            return Err(Error::shape(format!(
                "spd head for C={channels} needs {} planes, got {p}",
                spd::tri_len(channels)
            )));
        }
        let hw = h * w;
        let mut out = vec![0.0; p * hw];
        let data = t.data();
        for px in 0..hw {
            let mut l = [0.0f64; 6];
            for a in 0..channels {
                for b in 0..=a {
                    let idx = spd::tri_index(a, b);
                    let v = data[idx * hw + px];
                    l[idx] = if a == b { shifted_softplus(v) } else { v };
                }
            }
            for a in 0..channels {
                for b in 0..=a {
                    let mut acc = if a == b { EPS_PSD } else { 0.0 };
                    for k in 0..=b.min(a) {
                        acc += l[spd::tri_index(a, k)] * l[spd::tri_index(b, k)];
                    }
                    out[spd::tri_index(a, b) * hw + px] = acc;
                }
            }
        }
        let out = Tensor::new(vec![p, h, w], out)?;
        Ok(self.result(out, Op::SpdHead { raw, channels }, &[raw]))
    }

    /// Constrained negative log-likelihood, mean over valid pixels.
    ///
    /// `observed` is the noisy image (a constant: no gradient flows to it),
    /// `mu` the blind-spot prediction, `sigma_n` / `sigma_mu` covariance
    /// planes. `valid` must have one entry per pixel.
    pub fn gaussian_nll(
        &mut self,
        observed: &Tensor,
        mu: NodeId,
        sigma_n: NodeId,
        sigma_mu: NodeId,
        valid: &[bool],
    ) -> Result<NodeId> {
        let (c, h, w) = observed.chw()?;
        let mu_t = &self.nodes[mu].tensor;
        if mu_t.shape() != observed.shape() {
            return Err(Error::shape(format!(
                "mu shape {:?} does not match observation {:?}",
                mu_t.shape(),
                observed.shape()
            )));
        }
        let planes = spd::tri_len(c);
        for (name, id) in [("sigma_n", sigma_n), ("sigma_mu", sigma_mu)] {
            let t = &self.nodes[id].tensor;
            if t.shape() != [planes, h, w] {
                return Err(Error::shape(format!(
                    "{name} shape {:?}, expected [{planes}, {h}, {w}]",
                    t.shape()
                )));
            }
        }
        if valid.len() != h * w {
            return Err(Error::shape("valid mask length does not match pixel count"));
        }
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(Error::config("no valid pixels in loss mask"));
        }
        let total = nll_forward(
            observed,
            &self.nodes[mu].tensor,
            &self.nodes[sigma_n].tensor,
            &self.nodes[sigma_mu].tensor,
            valid,
            c,
        )?;
        let op = Op::GaussianNll {
            observed: observed.clone(),
            mu,
            sigma_n,
            sigma_mu,
            valid: valid.to_vec(),
            channels: c,
        };
        Ok(self.result(Tensor::scalar(total), op, &[mu, sigma_n, sigma_mu]))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Every reachable node with
    /// `requires_grad` ends up holding d(root)/d(node) in `grad`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root].tensor.is_scalar() {
            return Err(Error::shape("backward root must be scalar"));
        }
        // Fresh gradient buffers for this pass.
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        self.nodes[root].tensor.grad = Some(vec![1.0]);
        for id in (0..=root).rev() {
            if self.nodes[id].tensor.grad.is_none() || !self.nodes[id].tensor.requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id].tensor.requires_grad {
            return;
        }
        let n = self.nodes[id].tensor.numel();
        debug_assert_eq!(delta.len(), n);
        let grad = self.nodes[id].tensor.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backward_op(&mut self, id: NodeId, op: &Op) -> Result<()> {
        let upstream = self.nodes[id].tensor.grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, dilation, mask } => {
                let x = &self.nodes[*input].tensor;
                let w = &self.nodes[*kernel].tensor;
                let (c_in, h, wd) = x.chw().unwrap();
                let c_out = w.shape()[0];
                let k = w.shape()[2];
                if self.nodes[*input].tensor.requires_grad {
                    let d_in = conv2d_backward_input(
                        &upstream, w, *dilation, mask.as_ref(), c_out, c_in, h, wd, k,
                    );
                    self.accumulate(*input, &d_in);
                }
                if self.nodes[*kernel].tensor.requires_grad {
                    let d_k = conv2d_backward_kernel(
                        &upstream,
                        self.nodes[*input].tensor.data(),
                        *dilation,
                        mask.as_ref(),
                        c_out,
                        c_in,
                        h,
                        wd,
                        k,
                    );
                    self.accumulate(*kernel, &d_k);
                }
            }
            Op::BiasAdd { input, bias } => {
                self.accumulate(*input, &upstream);
                let (c, h, w) = self.nodes[*input].tensor.chw().unwrap();
                let hw = h * w;
                let d_b: Vec<f64> =
                    (0..c).map(|ch| pairwise_sum(&upstream[ch * hw..(ch + 1) * hw])).collect();
                self.accumulate(*bias, &d_b);
            }
            Op::Relu { input } => {
                let d: Vec<f64> = self.nodes[*input]
                    .tensor
                    .data()
                    .iter()
                    .zip(&upstream)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(*input, &d);
            }
            Op::ConcatChannels { inputs } => {
                let mut offset = 0;
                for &inp in inputs {
                    let n = self.nodes[inp].tensor.numel();
                    let slice = upstream[offset..offset + n].to_vec();
                    self.accumulate(inp, &slice);
                    offset += n;
                }
            }
            Op::SliceChannels { input, start, len } => {
                let (_, h, w) = self.nodes[*input].tensor.chw().unwrap();
                let hw = h * w;
                let mut d = vec![0.0; self.nodes[*input].tensor.numel()];
                d[start * hw..(start + len) * hw].copy_from_slice(&upstream);
                self.accumulate(*input, &d);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, &upstream);
                self.accumulate(*b, &upstream);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, &upstream);
                let neg: Vec<f64> = upstream.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = upstream
                    .iter()
                    .zip(self.nodes[*b].tensor.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db: Vec<f64> = upstream
                    .iter()
                    .zip(self.nodes[*a].tensor.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { input, factor } => {
                let d: Vec<f64> = upstream.iter().map(|g| g * factor).collect();
                self.accumulate(*input, &d);
            }
            Op::Sum { input } => {
                let g = upstream[0];
                let d = vec![g; self.nodes[*input].tensor.numel()];
                self.accumulate(*input, &d);
            }
            Op::SumSqDiff { a, b } => {
                let g = upstream[0];
                let ta = self.nodes[*a].tensor.data();
                let tb = self.nodes[*b].tensor.data();
                let da: Vec<f64> =
                    ta.iter().zip(tb).map(|(&x, &y)| 2.0 * g * (x - y)).collect();
                let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::SpdHead { raw, channels } => {
                let t = &self.nodes[*raw].tensor;
                let (p, h, w) = t.chw().unwrap();
                let hw = h * w;
                let data = t.data();
                let c = *channels;
                let mut d_raw = vec![0.0; p * hw];
                for px in 0..hw {
                    let mut l = [0.0f64; 6];
                    let mut raw_diag = [0.0f64; 3];
                    for a in 0..c {
                        for b in 0..=a {
                            let idx = spd::tri_index(a, b);
                            let v = data[idx * hw + px];
                            if a == b {
                                raw_diag[a] = v;
                                l[idx] = shifted_softplus(v);
                            } else {
                                l[idx] = v;
                            }
                        }
                    }
                    let mut d_l = [0.0f64; 6];
                    for a in 0..c {
                        for b in 0..=a {
                            let g = upstream[spd::tri_index(a, b) * hw + px];
                            if g == 0.0 {
                                continue;
                            }
                            for k in 0..=b {
                                d_l[spd::tri_index(a, k)] += g * l[spd::tri_index(b, k)];
                                d_l[spd::tri_index(b, k)] += g * l[spd::tri_index(a, k)];
                            }
                        }
                    }
                    for a in 0..c {
                        for b in 0..=a {
                            let idx = spd::tri_index(a, b);
                            let chain = if a == b { sigmoid(raw_diag[a]) } else { 1.0 };
                            d_raw[idx * hw + px] = d_l[idx] * chain;
                        }
                    }
                }
                self.accumulate(*raw, &d_raw);
            }
            Op::GaussianNll { observed, mu, sigma_n, sigma_mu, valid, channels } => {
                let g = upstream[0];
                let (d_mu, d_sn, d_smu) = nll_backward(
                    observed,
                    &self.nodes[*mu].tensor,
                    &self.nodes[*sigma_n].tensor,
                    &self.nodes[*sigma_mu].tensor,
                    valid,
                    *channels,
                    g,
                )?;
                self.accumulate(*mu, &d_mu);
                self.accumulate(*sigma_n, &d_sn);
                self.accumulate(*sigma_mu, &d_smu);
            }
        }
        Ok(())
    }
}

// ── Convolution kernels ─────────────────────────────────────────────
//
// Each (channel, tap) pair materializes one zero-padded shifted plane in
// a scratch buffer; the hot loops then run flat over whole planes. Zero
// entries from the padding contribute exactly nothing, so results match
// the per-pixel definition bit for bit while keeping the inner loops
// contiguous and branch-free.

#[inline]
fn tap_weight(w: &[f64], mask: Option<&Tensor>, o: usize, c: usize, u: usize, v: usize, c_in: usize, k: usize) -> f64 {
    let kv = w[((o * c_in + c) * k + u) * k + v];
    match mask {
        Some(m) => kv * m.data()[u * k + v],
        None => kv,
    }
}

/// scratch[i, j] = plane[i + dy, j + dx], zero where out of range.
fn shifted_plane(plane: &[f64], h: usize, w: usize, dy: isize, dx: isize, scratch: &mut [f64]) {
    scratch.fill(0.0);
    let i0 = (-dy).max(0) as usize;
    let i1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let j0 = (-dx).max(0) as usize;
    let j1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    if i0 >= i1 || j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let src = ((i as isize + dy) as usize) * w + (j0 as isize + dx) as usize;
        let dst = i * w + j0;
        scratch[dst..dst + (j1 - j0)].copy_from_slice(&plane[src..src + (j1 - j0)]);
    }
}

/// Adds `scratch` into `plane` at offset (+dy, +dx): the adjoint of
/// [`shifted_plane`].
fn scatter_shifted(plane: &mut [f64], h: usize, w: usize, dy: isize, dx: isize, scratch: &[f64]) {
    let i0 = (-dy).max(0) as usize;
    let i1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let j0 = (-dx).max(0) as usize;
    let j1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    if i0 >= i1 || j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let dst = ((i as isize + dy) as usize) * w + (j0 as isize + dx) as usize;
        let src = i * w + j0;
        let s = &scratch[src..src + (j1 - j0)];
        let d = &mut plane[dst..dst + (j1 - j0)];
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += sv;
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Rank-1 update of four output planes at once; reads `src` a single time.
#[inline]
fn axpy4(p0: &mut [f64], p1: &mut [f64], p2: &mut [f64], p3: &mut [f64], w: [f64; 4], src: &[f64]) {
    let n = src.len();
    assert!(p0.len() == n && p1.len() == n && p2.len() == n && p3.len() == n);
    for i in 0..n {
        let s = src[i];
        p0[i] += w[0] * s;
        p1[i] += w[1] * s;
        p2[i] += w[2] * s;
        p3[i] += w[3] * s;
    }
}

/// Four simultaneous dot products against a shared right-hand side.
#[inline]
fn dot4(a0: &[f64], a1: &[f64], a2: &[f64], a3: &[f64], b: &[f64]) -> [f64; 4] {
    let n = b.len();
    assert!(a0.len() == n && a1.len() == n && a2.len() == n && a3.len() == n);
    let mut acc = [0.0; 4];
    for i in 0..n {
        let s = b[i];
        acc[0] += a0[i] * s;
        acc[1] += a1[i] * s;
        acc[2] += a2[i] * s;
        acc[3] += a3[i] * s;
    }
    acc
}

/// dst += w0*s0 + w1*s1 + w2*s2 + w3*s3, elementwise.
#[inline]
fn axpy4_into(dst: &mut [f64], w: [f64; 4], s0: &[f64], s1: &[f64], s2: &[f64], s3: &[f64]) {
    let n = dst.len();
    assert!(s0.len() == n && s1.len() == n && s2.len() == n && s3.len() == n);
    for i in 0..n {
        dst[i] += w[0] * s0[i] + w[1] * s1[i] + w[2] * s2[i] + w[3] * s3[i];
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn tap_shift(k: usize, dilation: usize, u: usize, v: usize) -> (isize, isize) {
    let half = (k / 2) as isize;
    (dilation as isize * (u as isize - half), dilation as isize * (v as isize - half))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    dilation: usize,
    mask: Option<&Tensor>,
    c_out: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Tensor {
    let hw = h * wd;
    let mut out = vec![0.0; c_out * hw];
    let xd = x.data();
    let wdat = w.data();
    {
        let mut planes: Vec<&mut [f64]> = out.chunks_exact_mut(hw).collect();
        let mut scratch = vec![0.0; hw];
        for c in 0..c_in {
            let in_plane = &xd[c * hw..(c + 1) * hw];
            for u in 0..k {
                for v in 0..k {
                    if let Some(m) = mask {
                        if m.data()[u * k + v] == 0.0 {
                            continue;
                        }
                    }
                    // Pointwise convs read the plane directly; windows go
                    // through the zero-padded shift.
                    let src: &[f64] = if k == 1 {
                        in_plane
                    } else {
                        let (dy, dx) = tap_shift(k, dilation, u, v);
                        shifted_plane(in_plane, h, wd, dy, dx, &mut scratch);
                        &scratch
                    };
                    let mut o = 0;
                    while o + 4 <= c_out {
                        let w4 = [
                            tap_weight(wdat, mask, o, c, u, v, c_in, k),
                            tap_weight(wdat, mask, o + 1, c, u, v, c_in, k),
                            tap_weight(wdat, mask, o + 2, c, u, v, c_in, k),
                            tap_weight(wdat, mask, o + 3, c, u, v, c_in, k),
                        ];
                        if let [p0, p1, p2, p3] = &mut planes[o..o + 4] {
                            axpy4(p0, p1, p2, p3, w4, src);
                        }
                        o += 4;
                    }
                    while o < c_out {
                        let wgt = tap_weight(wdat, mask, o, c, u, v, c_in, k);
                        if wgt != 0.0 {
                            axpy(planes[o], wgt, src);
                        }
                        o += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, h, wd], out).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    upstream: &[f64],
    w: &Tensor,
    dilation: usize,
    mask: Option<&Tensor>,
    c_out: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let hw = h * wd;
    let mut d_in = vec![0.0; c_in * hw];
    let wdat = w.data();
    let mut scratch = vec![0.0; hw];
    let up = |o: usize| &upstream[o * hw..(o + 1) * hw];
    for c in 0..c_in {
        let din_plane = &mut d_in[c * hw..(c + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                if let Some(m) = mask {
                    if m.data()[u * k + v] == 0.0 {
                        continue;
                    }
                }
                // Forward reads in[i+dy, j+dx] for out[i, j]; the adjoint
                // scatters sum_o w_o * upstream_o back by the same shift.
                scratch.fill(0.0);
                let mut o = 0;
                while o + 4 <= c_out {
                    let w4 = [
                        tap_weight(wdat, mask, o, c, u, v, c_in, k),
                        tap_weight(wdat, mask, o + 1, c, u, v, c_in, k),
                        tap_weight(wdat, mask, o + 2, c, u, v, c_in, k),
                        tap_weight(wdat, mask, o + 3, c, u, v, c_in, k),
                    ];
                    axpy4_into(&mut scratch, w4, up(o), up(o + 1), up(o + 2), up(o + 3));
                    o += 4;
                }
                while o < c_out {
                    let wgt = tap_weight(wdat, mask, o, c, u, v, c_in, k);
                    if wgt != 0.0 {
                        axpy(&mut scratch, wgt, up(o));
                    }
                    o += 1;
                }
                let (dy, dx) = tap_shift(k, dilation, u, v);
                if k == 1 {
                    axpy(din_plane, 1.0, &scratch);
                } else {
                    scatter_shifted(din_plane, h, wd, dy, dx, &scratch);
                }
            }
        }
    }
    d_in
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    upstream: &[f64],
    xd: &[f64],
    dilation: usize,
    mask: Option<&Tensor>,
    c_out: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let hw = h * wd;
    let mut d_k = vec![0.0; c_out * c_in * k * k];
    let mut scratch = vec![0.0; hw];
    for c in 0..c_in {
        let in_plane = &xd[c * hw..(c + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                if let Some(m) = mask {
                    // Masked taps keep an exactly-zero gradient.
                    if m.data()[u * k + v] == 0.0 {
                        continue;
                    }
                }
                let src: &[f64] = if k == 1 {
                    in_plane
                } else {
                    let (dy, dx) = tap_shift(k, dilation, u, v);
                    shifted_plane(in_plane, h, wd, dy, dx, &mut scratch);
                    &scratch
                };
                let up = |o: usize| &upstream[o * hw..(o + 1) * hw];
                let mut o = 0;
                while o + 4 <= c_out {
                    let acc = dot4(up(o), up(o + 1), up(o + 2), up(o + 3), src);
                    for (blk, &a) in acc.iter().enumerate() {
                        d_k[(((o + blk) * c_in + c) * k + u) * k + v] = a;
                    }
                    o += 4;
                }
                while o < c_out {
                    d_k[((o * c_in + c) * k + u) * k + v] = dot(up(o), src);
                    o += 1;
                }
            }
        }
    }
    d_k
}

// ── Gaussian NLL kernels ────────────────────────────────────────────

struct PixelMats {
    sn: SymMat,
    smu: SymMat,
    s_inv: SymMat,
    sn_inv: SymMat,
    eps: Vec<f64>,
}

fn pixel_mats(
    observed: &Tensor,
    mu: &Tensor,
    sigma_n: &Tensor,
    sigma_mu: &Tensor,
    c: usize,
    hw: usize,
    px: usize,
) -> Result<PixelMats> {
    let planes = spd::tri_len(c);
    let mut tri_n = vec![0.0; planes];
    let mut tri_mu = vec![0.0; planes];
    for t in 0..planes {
        tri_n[t] = sigma_n.data()[t * hw + px];
        tri_mu[t] = sigma_mu.data()[t * hw + px];
    }
    let sn = SymMat::from_tri(c, &tri_n);
    let smu = SymMat::from_tri(c, &tri_mu);
    let s = sn.add(&smu);
    let s_inv = s
        .inverse()
        .map_err(|_| Error::numeric(format!("sigma_n + sigma_mu singular at pixel {px}")))?;
    let sn_inv = sn
        .inverse()
        .map_err(|_| Error::numeric(format!("sigma_n not positive definite at pixel {px}")))?;
    let eps: Vec<f64> = (0..c).map(|ch| observed.data()[ch * hw + px] - mu.data()[ch * hw + px]).collect();
    Ok(PixelMats { sn, smu, s_inv, sn_inv, eps })
}

fn nll_forward(
    observed: &Tensor,
    mu: &Tensor,
    sigma_n: &Tensor,
    sigma_mu: &Tensor,
    valid: &[bool],
    c: usize,
) -> Result<f64> {
    let (_, h, w) = observed.chw()?;
    let hw = h * w;
    let mut terms = Vec::with_capacity(valid.iter().filter(|&&v| v).count());
    for px in 0..hw {
        if !valid[px] {
            continue;
        }
        let m = pixel_mats(observed, mu, sigma_n, sigma_mu, c, hw, px)?;
        let det_n = m.sn.det();
        if !(det_n > spd::DET_FLOOR) {
            return Err(Error::numeric(format!("det(sigma_n) <= 0 at pixel {px}")));
        }
        let quad: f64 = {
            let sv = m.s_inv.mul_vec(&m.eps);
            m.eps.iter().zip(&sv).map(|(&a, &b)| a * b).sum()
        };
        let term = 0.5 * (quad + det_n.ln() + m.sn_inv.trace_product(&m.smu));
        if !term.is_finite() {
            return Err(Error::numeric(format!("non-finite loss term at pixel {px}")));
        }
        terms.push(term);
    }
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

fn nll_backward(
    observed: &Tensor,
    mu: &Tensor,
    sigma_n: &Tensor,
    sigma_mu: &Tensor,
    valid: &[bool],
    c: usize,
    g: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (_, h, w) = observed.chw()?;
    let hw = h * w;
    let planes = spd::tri_len(c);
    let n_valid = valid.iter().filter(|&&v| v).count() as f64;
    let scale = g / n_valid;
    let mut d_mu = vec![0.0; c * hw];
    let mut d_sn = vec![0.0; planes * hw];
    let mut d_smu = vec![0.0; planes * hw];
    for px in 0..hw {
        if !valid[px] {
            continue;
        }
        let m = pixel_mats(observed, mu, sigma_n, sigma_mu, c, hw, px)?;
        let s_inv_eps = m.s_inv.mul_vec(&m.eps);
        // d/d_mu of 1/2 eps^T S^-1 eps with eps = y - mu.
        for ch in 0..c {
            d_mu[ch * hw + px] = -scale * s_inv_eps[ch];
        }
        // Symmetric matrix gradients.
        // quad: -1/2 S^-1 eps eps^T S^-1 (both covariances)
        // logdet: +1/2 Sn^-1 (sigma_n only)
        // trace: +1/2 Sn^-1 (sigma_mu), -1/2 Sn^-1 Smu Sn^-1 (sigma_n)
        let mut quad_grad = SymMat::zeros(c);
        for a in 0..c {
            for b in 0..=a {
                quad_grad.set(a, b, -0.5 * s_inv_eps[a] * s_inv_eps[b]);
            }
        }
        // Sn^-1 Smu Sn^-1
        let mut inner = SymMat::zeros(c);
        for a in 0..c {
            for b in 0..=a {
                let mut acc = 0.0;
                for i in 0..c {
                    for j in 0..c {
                        acc += m.sn_inv.get(a, i) * m.smu.get(i, j) * m.sn_inv.get(j, b);
                    }
                }
                inner.set(a, b, acc);
            }
        }
        for a in 0..c {
            for b in 0..=a {
                let idx = spd::tri_index(a, b) * hw + px;
                let mult = if a == b { 1.0 } else { 2.0 };
                let g_sn = quad_grad.get(a, b) + 0.5 * m.sn_inv.get(a, b) - 0.5 * inner.get(a, b);
                let g_smu = quad_grad.get(a, b) + 0.5 * m.sn_inv.get(a, b);
                d_sn[idx] = scale * mult * g_sn;
                d_smu[idx] = scale * mult * g_smu;
            }
        }
    }
    Ok((d_mu, d_sn, d_smu))
}

// ── Finite-difference verification ──────────────────────────────────

/// Compares an autodiff gradient against central finite differences.
///
/// `f` evaluates the scalar objective at a parameter value; `autodiff_grad`
/// is the gradient to verify, one entry per element of `p`. Returns the
/// maximum relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    p: &Tensor,
    autodiff_grad: &[f64],
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    if autodiff_grad.len() != p.numel() {
        return Err(Error::shape("gradient length does not match parameter count"));
    }
    let mut max_rel = 0.0f64;
    let mut work = p.clone();
    for i in 0..p.numel() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + eps;
        let fp = f(&work)?;
        work.data_mut()[i] = orig - eps;
        let fm = f(&work)?;
        work.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "objective non-finite at perturbed component {i}"
            )));
        }
        let fd = (fp - fm) / (2.0 * eps);
        let ad = autodiff_grad[i];
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent nested-loop correlation oracle. Mirrors the contract
    /// definition directly and shares no code with the graph path.
    #[allow(clippy::too_many_arguments)]
    fn conv_reference(
        x: &Tensor,
        w: &Tensor,
        dilation: usize,
        mask: Option<&Tensor>,
    ) -> Tensor {
        let (c_in, h, wd) = x.chw().unwrap();
        let c_out = w.shape()[0];
        let k = w.shape()[2];
        let half = (k / 2) as isize;
        let mut out = Tensor::zeros(vec![c_out, h, wd]);
        for o in 0..c_out {
            for i in 0..h as isize {
                for j in 0..wd as isize {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for u in 0..k as isize {
                            for v in 0..k as isize {
                                let ii = i + dilation as isize * (u - half);
                                let jj = j + dilation as isize * (v - half);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                let mval = mask
                                    .map(|m| m.data()[(u * k as isize + v) as usize])
                                    .unwrap_or(1.0);
                                acc += x.at3(c, ii as usize, jj as usize)
                                    * w.data()[(((o * c_in + c) * k + u as usize) * k)
                                        + v as usize]
                                    * mval;
                            }
                        }
                    }
                    out.set3(o, i as usize, j as usize, acc);
                }
            }
        }
        out
    }

    fn randn_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn center_mask(k: usize) -> Tensor {
        let mut m = Tensor::full(vec![k, k], 1.0);
        m.data_mut()[(k / 2) * k + k / 2] = 0.0;
        m
    }

    #[test]
    fn conv_single_multiply() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let y = g.conv2d(x, w, 1, None).unwrap();
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_masked_ones_interior() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 7, 7], 1.0));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let mask = center_mask(3);
        let y = g.conv2d(x, w, 1, Some(&mask)).unwrap();
        // Interior pixels see 8 unmasked taps of value 1.
        for i in 1..6 {
            for j in 1..6 {
                assert_eq!(g.value(y).at3(0, i, j), 8.0);
            }
        }
    }

    #[test]
    fn conv_matches_reference_dilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = randn_tensor(vec![1, 9, 9], &mut rng);
        let w = randn_tensor(vec![1, 1, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(w.clone());
        let y = g.conv2d(xi, wi, 2, None).unwrap();
        let expect = conv_reference(&x, &w, 2, None);
        for (a, b) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_reference_multichannel_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(dil, k) in &[(1usize, 3usize), (2, 3), (3, 5)] {
            let x = randn_tensor(vec![3, 8, 8], &mut rng);
            let w = randn_tensor(vec![2, 3, k, k], &mut rng);
            let mask = center_mask(k);
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            let y = g.conv2d(xi, wi, dil, Some(&mask)).unwrap();
            let expect = conv_reference(&x, &w, dil, Some(&mask));
            for (a, b) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "dil={dil} k={k}");
            }
        }
    }

    #[test]
    fn conv_linear_in_input_and_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn_tensor(vec![2, 6, 6], &mut rng);
        let y = randn_tensor(vec![2, 6, 6], &mut rng);
        let w = randn_tensor(vec![2, 2, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let run = |inp: &Tensor, ker: &Tensor| {
            let mut g = Graph::new();
            let xi = g.constant(inp.clone());
            let wi = g.constant(ker.clone());
            let o = g.conv2d(xi, wi, 1, None).unwrap();
            g.value(o).clone()
        };
        let mixed = Tensor::new(
            vec![2, 6, 6],
            x.data().iter().zip(y.data()).map(|(&p, &q)| a * p + b * q).collect(),
        )
        .unwrap();
        let lhs = run(&mixed, &w);
        let rx = run(&x, &w);
        let ry = run(&y, &w);
        for ((l, p), q) in lhs.data().iter().zip(rx.data()).zip(ry.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4, 4]));
        let w_even = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(matches!(g.conv2d(x, w_even, 1, None), Err(Error::Config(_))));
        let w_badc = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, w_badc, 1, None), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_forward_and_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1, 2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![2, 3, 3], -4.0));
        let r = g.relu(x);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn_tensor(vec![1, 2, 2], &mut rng);
        let b = randn_tensor(vec![2, 2, 2], &mut rng);
        let mut g = Graph::new();
        let ai = g.constant(a.clone());
        let bi = g.constant(b.clone());
        let cat = g.concat_channels(&[ai, bi]).unwrap();
        assert_eq!(g.value(cat).shape(), &[3, 2, 2]);
        assert_eq!(&g.value(cat).data()[..4], a.data());
        let sa = g.slice_channels(cat, 0, 1).unwrap();
        let sb = g.slice_channels(cat, 1, 2).unwrap();
        assert_eq!(g.value(sa).data(), a.data());
        assert_eq!(g.value(sb).data(), b.data());
    }

    #[test]
    fn concat_grad_is_ones_on_both_inputs() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(vec![1, 2, 2]));
        let b = g.param(Tensor::zeros(vec![2, 2, 2]));
        let cat = g.concat_channels(&[a, b]).unwrap();
        let s = g.sum(cat);
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 2, 2]));
        let b = g.constant(Tensor::zeros(vec![1, 3, 2]));
        assert!(g.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn backward_square_function() {
        // f = x * x at x = 3 -> df/dx = 6.
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![1, 2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_conv_kernel_grad_matches_reference() {
        // d/dw sum(conv(x, w)) equals the correlation of an all-ones
        // upstream with x; checked against the nested-loop oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn_tensor(vec![2, 7, 7], &mut rng);
        let w = randn_tensor(vec![3, 2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let wi = g.param(w.clone());
        let y = g.conv2d(xi, wi, 2, None).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(wi).unwrap();

        // Oracle: perturbation-free direct formula.
        let k = 3usize;
        let half = 1isize;
        for o in 0..3 {
            for c in 0..2 {
                for u in 0..k {
                    for v in 0..k {
                        let mut acc = 0.0;
                        for i in 0..7isize {
                            for j in 0..7isize {
                                let ii = i + 2 * (u as isize - half);
                                let jj = j + 2 * (v as isize - half);
                                if ii < 0 || jj < 0 || ii >= 7 || jj >= 7 {
                                    continue;
                                }
                                acc += x.at3(c, ii as usize, jj as usize);
                            }
                        }
                        let got = grad[((o * 2 + c) * k + u) * k + v];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_kernel_grad_exactly_zero_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn_tensor(vec![1, 6, 6], &mut rng);
        let w = randn_tensor(vec![2, 1, 3, 3], &mut rng);
        let mask = center_mask(3);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let wi = g.param(w);
        let y = g.conv2d(xi, wi, 1, Some(&mask)).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(wi).unwrap();
        for o in 0..2 {
            assert_eq!(grad[(o * 9) + 4], 0.0, "masked center must stay zero");
            let nonzero = grad[o * 9..(o + 1) * 9].iter().filter(|&&v| v != 0.0).count();
            assert_eq!(nonzero, 8);
        }
    }

    #[test]
    fn disjoint_graphs_do_not_interfere() {
        let run = |x0: f64| {
            let mut g = Graph::new();
            let x = g.param(Tensor::scalar(x0));
            let y = g.mul(x, x).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            g.grad(x).unwrap()[0]
        };
        let a_alone = run(3.0);
        // Interleaved graphs.
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x1 = g1.param(Tensor::scalar(3.0));
        let x2 = g2.param(Tensor::scalar(4.0));
        let y1 = g1.mul(x1, x1).unwrap();
        let y2 = g2.mul(x2, x2).unwrap();
        let s1 = g1.sum(y1);
        let s2 = g2.sum(y2);
        g1.backward(s1).unwrap();
        g2.backward(s2).unwrap();
        assert_eq!(g1.grad(x1).unwrap()[0], a_alone);
        assert_eq!(g2.grad(x2).unwrap()[0], 8.0);
    }

    #[test]
    fn bias_add_backward_sums_spatially() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn_tensor(vec![2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let bi = g.param(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let y = g.bias_add(xi, bi).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(bi).unwrap(), &[9.0, 9.0]);
    }

    #[test]
    fn finite_diff_quadratic() {
        // f = sum p^2 has exact derivative 2p.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = randn_tensor(vec![5], &mut rng);
        let grad: Vec<f64> = p.data().iter().map(|&v| 2.0 * v).collect();
        let err = finite_diff_check(
            |t| Ok(t.data().iter().map(|&v| v * v).sum()),
            &p,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err={err:e}");
    }

    #[test]
    fn finite_diff_relu_locally_linear() {
        let p = Tensor::new(vec![4], vec![1.5, 2.0, 3.25, 10.0]).unwrap();
        let grad = vec![1.0; 4];
        let err = finite_diff_check(
            |t| Ok(t.data().iter().map(|&v| v.max(0.0)).sum()),
            &p,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err={err:e}");
    }

    #[test]
    fn finite_diff_through_graph_composite() {
        // conv -> relu -> bias -> sum_sq_diff against a constant target.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = randn_tensor(vec![1, 5, 5], &mut rng);
        let w0 = randn_tensor(vec![2, 1, 3, 3], &mut rng);
        let b0 = randn_tensor(vec![2], &mut rng);
        let target = randn_tensor(vec![2, 5, 5], &mut rng);

        let eval = |w: &Tensor| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let wi = g.param(w.clone());
            let bi = g.constant(b0.clone());
            let c = g.conv2d(xi, wi, 2, None)?;
            let cb = g.bias_add(c, bi)?;
            let r = g.relu(cb);
            let ti = g.constant(target.clone());
            let loss = g.sum_sq_diff(r, ti)?;
            let v = g.scalar_value(loss);
            g.backward(loss)?;
            Ok((v, g.grad(wi).unwrap().to_vec()))
        };
        let (_, grad) = eval(&w0).unwrap();
        let err = finite_diff_check(|w| eval(w).map(|(v, _)| v), &w0, &grad, 1e-5).unwrap();
        assert!(err < 1e-6, "err={err:e}");
    }

    #[test]
    fn spd_head_zero_raw_gives_eps_identity() {
        let mut g = Graph::new();
        let raw = g.constant(Tensor::zeros(vec![6, 2, 2]));
        let planes = g.spd_head(raw, 3).unwrap();
        let hw = 4;
        for px in 0..hw {
            for a in 0..3 {
                for b in 0..=a {
                    let v = g.value(planes).data()[spd::tri_index(a, b) * hw + px];
                    let expect = if a == b { EPS_PSD } else { 0.0 };
                    assert_eq!(v, expect);
                }
            }
        }
    }

    #[test]
    fn spd_head_output_is_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let raw = randn_tensor(vec![6, 3, 3], &mut rng);
        let mut g = Graph::new();
        let ri = g.constant(raw);
        let planes = g.spd_head(ri, 3).unwrap();
        let field = crate::spd::CovField::new(3, g.value(planes).clone()).unwrap();
        assert!(field.min_eigenvalue() >= EPS_PSD * 0.999);
    }

    #[test]
    fn spd_head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for c in [1usize, 2, 3] {
            let p = spd::tri_len(c);
            let raw = randn_tensor(vec![p, 2, 2], &mut rng);
            let weights = randn_tensor(vec![p, 2, 2], &mut rng);
            let eval = |r: &Tensor| -> Result<(f64, Vec<f64>)> {
                let mut g = Graph::new();
                let ri = g.param(r.clone());
                let planes = g.spd_head(ri, c)?;
                let wi = g.constant(weights.clone());
                let weighted = g.mul(planes, wi)?;
                let s = g.sum(weighted);
                let v = g.scalar_value(s);
                g.backward(s)?;
                Ok((v, g.grad(ri).unwrap().to_vec()))
            };
            let (_, grad) = eval(&raw).unwrap();
            let err = finite_diff_check(|r| eval(r).map(|(v, _)| v), &raw, &grad, 1e-5).unwrap();
            assert!(err < 1e-6, "C={c} err={err:e}");
        }
    }

    #[test]
    fn gaussian_nll_scalar_cases() {
        // C=1, eps=0, total covariance 1 -> 0; eps=1 -> 0.5.
        // Achieved with sigma_n = 1 (identity planes) and sigma_mu = 0.
        let make = |y_val: f64, mu_val: f64| -> f64 {
            let y = Tensor::full(vec![1, 1, 1], y_val);
            let mut g = Graph::new();
            let mu = g.constant(Tensor::full(vec![1, 1, 1], mu_val));
            let sn = g.constant(Tensor::full(vec![1, 1, 1], 1.0));
            let smu = g.constant(Tensor::full(vec![1, 1, 1], 0.0));
            let loss = g.gaussian_nll(&y, mu, sn, smu, &[true]).unwrap();
            g.scalar_value(loss)
        };
        assert!((make(2.0, 2.0) - 0.0).abs() < 1e-15);
        assert!((make(3.0, 2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for c in [1usize, 3] {
            let p = spd::tri_len(c);
            let y = randn_tensor(vec![c, 3, 3], &mut rng);
            let mu0 = randn_tensor(vec![c, 3, 3], &mut rng);
            let mut raw_n0 = randn_tensor(vec![p, 3, 3], &mut rng);
            let mut raw_mu0 = randn_tensor(vec![p, 3, 3], &mut rng);
            // Lift the diagonal planes away from the near-singular region;
            // finite differences lose accuracy where the curvature blows up.
            for a in 0..c {
                let idx = spd::tri_index(a, a);
                for raw in [&mut raw_n0, &mut raw_mu0] {
                    for v in raw.plane_mut(idx) {
                        *v += 1.5;
                    }
                }
            }
            let valid = vec![true; 9];

            // Check gradients wrt mu and both raw covariance heads.
            let eval = |mu_t: &Tensor, rn: &Tensor, rmu: &Tensor| -> Result<(f64, Vec<Vec<f64>>)> {
                let mut g = Graph::new();
                let mu = g.param(mu_t.clone());
                let rni = g.param(rn.clone());
                let rmui = g.param(rmu.clone());
                let sn = g.spd_head(rni, c)?;
                let smu = g.spd_head(rmui, c)?;
                let loss = g.gaussian_nll(&y, mu, sn, smu, &valid)?;
                let v = g.scalar_value(loss);
                g.backward(loss)?;
                Ok((
                    v,
                    vec![
                        g.grad(mu).unwrap().to_vec(),
                        g.grad(rni).unwrap().to_vec(),
                        g.grad(rmui).unwrap().to_vec(),
                    ],
                ))
            };
            let (_, grads) = eval(&mu0, &raw_n0, &raw_mu0).unwrap();
            let err_mu = finite_diff_check(
                |m| eval(m, &raw_n0, &raw_mu0).map(|(v, _)| v),
                &mu0,
                &grads[0],
                1e-5,
            )
            .unwrap();
            let err_n = finite_diff_check(
                |r| eval(&mu0, r, &raw_mu0).map(|(v, _)| v),
                &raw_n0,
                &grads[1],
                1e-5,
            )
            .unwrap();
            let err_smu = finite_diff_check(
                |r| eval(&mu0, &raw_n0, r).map(|(v, _)| v),
                &raw_mu0,
                &grads[2],
                1e-5,
            )
            .unwrap();
            assert!(err_mu < 1e-5, "C={c} err_mu={err_mu:e}");
            assert!(err_n < 1e-5, "C={c} err_n={err_n:e}");
            assert!(err_smu < 1e-5, "C={c} err_smu={err_smu:e}");
        }
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let v: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let naive: f64 = v.iter().sum();
        assert!((pairwise_sum(&v) - naive).abs() < 1e-10);
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[2.5]), 2.5);
    }
}
