//! The fixed small-network family: an MLP over (state, sinusoidal time
//! features, condition) with smooth activations and hand-rolled reverse-mode
//! gradients.
//!
//! The trained field is integrated by an ODE solver, so every activation is
//! smooth (SiLU). Forward passes can record a trace; [`backward`] consumes a
//! trace and produces exact parameter gradients plus the gradient with
//! respect to the state input, which longer chains (reverse diffusion,
//! reconstruction losses) need for backpropagation through time.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// State dimension d: both input slice and output size.
    pub state_dim: usize,
    /// Hidden layer widths; empty means a single linear layer.
    pub hidden: Vec<usize>,
    /// Condition dimension c (0 = unconditional).
    pub cond_dim: usize,
    /// Number of sinusoidal time-feature pairs K; frequencies 2^k.
    pub time_freqs: usize,
}

impl NetConfig {
    pub fn new(state_dim: usize, hidden: Vec<usize>) -> Self {
        NetConfig { state_dim, hidden, cond_dim: 0, time_freqs: 4 }
    }

    pub fn with_cond(mut self, cond_dim: usize) -> Self {
        self.cond_dim = cond_dim;
        self
    }

    pub fn with_time_freqs(mut self, k: usize) -> Self {
        self.time_freqs = k;
        self
    }

    /// Input width of the first layer: d + 2K + c.
    pub fn input_dim(&self) -> usize {
        self.state_dim + 2 * self.time_freqs + self.cond_dim
    }

    /// Layer dimensions as (rows, cols) pairs.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((h, prev));
            prev = h;
        }
        dims.push((self.state_dim, prev));
        dims
    }

    /// Closed-form parameter count: sum over layers of rows*cols + rows.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(r, c)| r * c + r).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("state_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major rows x cols.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer { rows, cols, w: vec![0.0; rows * cols], b: vec![0.0; rows] }
    }

    #[inline]
    pub(crate) fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            out[r] = acc;
        }
    }

    /// dx += W^T delta
    #[inline]
    pub(crate) fn matvec_t_acc(&self, delta: &[f64], dx: &mut [f64]) {
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let d = delta[r];
            for (dxv, wv) in dx.iter_mut().zip(row) {
                *dxv += wv * d;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// MLP velocity model v(x, t, cond) -> R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    cfg: NetConfig,
    pub(crate) layers: Vec<Layer>,
}

/// Recorded intermediates of one forward pass; consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Embedded input [x | time features | cond].
    input: Vec<f64>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations per hidden layer (last layer is linear, its output
    /// is `pre.last()`).
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub(crate) fn from_parts(input: Vec<f64>, pre: Vec<Vec<f64>>, post: Vec<Vec<f64>>) -> Self {
        ForwardTrace { input, pre, post }
    }

    pub(crate) fn pre_activations(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }

    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("trace has at least one layer")
    }

    /// Post-activation of hidden layer l (0-based). Used by activation
    /// alignment losses.
    pub fn hidden(&self, l: usize) -> &[f64] {
        &self.post[l]
    }

    pub fn n_hidden(&self) -> usize {
        self.post.len()
    }
}

/// Flat gradient accumulator mirroring a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub(crate) layers: Vec<Layer>,
}

impl GradientBuffer {
    pub fn zeros_like(net: &VelocityNet) -> Self {
        GradientBuffer {
            layers: net.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
        }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v *= s);
            l.b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Accumulate `scale * flat` into the buffer, flat layout matching
    /// `to_flat`.
    pub fn add_from_flat(&mut self, flat: &[f64], scale: f64) {
        let mut off = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v += scale * flat[off];
                off += 1;
            }
            for v in l.b.iter_mut() {
                *v += scale * flat[off];
                off += 1;
            }
        }
        assert_eq!(off, flat.len(), "flat gradient length");
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl VelocityNet {
    /// Glorot-uniform initialization: +/- sqrt(6 / (fan_in + fan_out)).
    pub fn init(cfg: NetConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for (rows, cols) in cfg.layer_dims() {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let mut l = Layer::zeros(rows, cols);
            for w in l.w.iter_mut() {
                *w = rng.uniform_in(-bound, bound);
            }
            layers.push(l);
        }
        Ok(VelocityNet { cfg, layers })
    }

    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg.layer_dims().iter().map(|&(r, c)| Layer::zeros(r, c)).collect();
        Ok(VelocityNet { cfg, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// Embed (x, t, cond) into the first-layer input.
    pub(crate) fn embed_input(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.embed(x, t, cond)
    }

    fn embed(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.len() != self.cfg.state_dim {
            return Err(Error::shape(
                format!("{}", self.cfg.state_dim),
                format!("{}", x.len()),
                "forward: state",
            ));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("time {t} outside [0,1]")));
        }
        let clen = cond.map_or(0, <[f64]>::len);
        if clen != self.cfg.cond_dim {
            return Err(Error::shape(
                format!("{}", self.cfg.cond_dim),
                format!("{clen}"),
                "forward: condition",
            ));
        }
        let mut z = Vec::with_capacity(self.cfg.input_dim());
        z.extend_from_slice(x);
        for k in 0..self.cfg.time_freqs {
            let f = (1u64 << k) as f64;
            let (s, c) = (TWO_PI * f * t).sin_cos();
            z.push(s);
            z.push(c);
        }
        if let Some(c) = cond {
            z.extend_from_slice(c);
        }
        Ok(z)
    }

    /// Plain forward pass: v(x, t, cond).
    pub fn forward(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let (out, _) = self.forward_traced(x, t, cond)?;
        Ok(out)
    }

    /// Forward pass recording intermediates for backprop.
    pub fn forward_traced(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<(Vec<f64>, ForwardTrace)> {
        let input = self.embed(x, t, cond)?;
        let n_layers = self.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut cur = input.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut a = vec![0.0; layer.rows];
            layer.matvec(&cur, &mut a);
            if li + 1 < n_layers {
                let h: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
                cur = h.clone();
                pre.push(a);
                post.push(h);
            } else {
                pre.push(a.clone());
                cur = a;
            }
        }
        Ok((cur, ForwardTrace { input, pre, post }))
    }

    /// Batched forward: x is [n, d], cond is [n, c] (or None), t one value
    /// per row.
    pub fn forward_batch(&self, x: &Tensor, times: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        let n = x.n_rows();
        if times.len() != n {
            return Err(Error::shape(format!("{n}"), format!("{}", times.len()), "forward_batch times"));
        }
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let c = cond.map(|c| c.row(i));
            rows.push(self.forward(x.row(i), times[i], c)?);
        }
        Tensor::from_rows(&rows)
    }

    /// Reverse pass for a scalar loss.
    ///
    /// `d_out` is dL/d(output); optional `d_hidden[l]` adds dL/d(hidden
    /// activation l) for losses attached to intermediate activations.
    /// Gradients accumulate into `grads`; the returned vector is dL/dx
    /// (gradient w.r.t. the state slice of the input).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_out: &[f64],
        d_hidden: Option<&[Vec<f64>]>,
        grads: &mut GradientBuffer,
    ) -> Result<Vec<f64>> {
        let n_layers = self.layers.len();
        if d_out.len() != self.cfg.state_dim {
            return Err(Error::shape(
                format!("{}", self.cfg.state_dim),
                format!("{}", d_out.len()),
                "backward: d_out",
            ));
        }
        if let Some(dh) = d_hidden {
            if dh.len() != trace.post.len() {
                return Err(Error::shape(
                    format!("{}", trace.post.len()),
                    format!("{}", dh.len()),
                    "backward: d_hidden layer count",
                ));
            }
        }
        // delta = dL/d(pre-activation of current layer)
        let mut delta = d_out.to_vec();
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let input: &[f64] = if li == 0 { &trace.input } else { &trace.post[li - 1] };
            let g = &mut grads.layers[li];
            for r in 0..layer.rows {
                let d = delta[r];
                g.b[r] += d;
                let grow = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                for (gv, xv) in grow.iter_mut().zip(input) {
                    *gv += d * xv;
                }
            }
            let mut d_in = vec![0.0; layer.cols];
            layer.matvec_t_acc(&delta, &mut d_in);
            if li > 0 {
                // Through the SiLU of the previous hidden layer, plus any
                // loss terms attached directly to that activation.
                if let Some(dh) = d_hidden {
                    for (v, add) in d_in.iter_mut().zip(&dh[li - 1]) {
                        *v += add;
                    }
                }
                let pre_prev = &trace.pre[li - 1];
                delta = d_in.iter().zip(pre_prev).map(|(d, a)| d * silu_prime(*a)).collect();
            } else {
                return Ok(d_in[..self.cfg.state_dim].to_vec());
            }
        }
        unreachable!("loop always returns at layer 0")
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// Models exposing their trainable parameters as one flat vector, in a fixed
/// declaration order. Gradient buffers flatten to the same order.
pub trait ParamVector: Clone {
    fn num_params(&self) -> usize;
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, p: &[f64]);
}

impl ParamVector for VelocityNet {
    fn num_params(&self) -> usize {
        self.param_count()
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    fn set_flat_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }
}

/// Central-difference gradient check.
///
/// Returns the max over parameters of |analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-12). `loss` must be deterministic.
pub fn grad_check<M, F, G>(model: &M, loss: F, analytic: G, h: f64) -> Result<f64>
where
    M: ParamVector,
    F: Fn(&M) -> Result<f64>,
    G: Fn(&M) -> Result<Vec<f64>>,
{
    let base = loss(model)?;
    if !base.is_finite() {
        return Err(Error::numeric(format!("grad_check: non-finite loss {base}")));
    }
    let grad = analytic(model)?;
    let p0 = model.flat_params();
    if grad.len() != p0.len() {
        return Err(Error::shape(
            format!("{}", p0.len()),
            format!("{}", grad.len()),
            "grad_check: analytic gradient length",
        ));
    }
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let mut p = p0.clone();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        probe.set_flat_params(&p);
        let lp = loss(&probe)?;
        p[i] = orig - h;
        probe.set_flat_params(&p);
        let lm = loss(&probe)?;
        p[i] = orig;
        if !(lp.is_finite() && lm.is_finite()) {
            return Err(Error::numeric(format!("grad_check: non-finite loss at parameter {i}")));
        }
        let numeric = (lp - lm) / (2.0 * h);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetConfig {
        NetConfig::new(2, vec![8, 8]).with_cond(3)
    }

    #[test]
    fn param_count_closed_form() {
        let cfg = small_cfg();
        // input = 2 + 8 + 3 = 13; layers: 8x13+8, 8x8+8, 2x8+2
        assert_eq!(cfg.param_count(), 8 * 13 + 8 + 8 * 8 + 8 + 2 * 8 + 2);
        let net = VelocityNet::zeros(cfg).unwrap();
        assert_eq!(net.flat_params().len(), net.param_count());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = VelocityNet::zeros(small_cfg()).unwrap();
        let out = net.forward(&[1.5, -2.0], 0.3, Some(&[1.0, 0.0, 2.0])).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        // One linear layer, identity on the state slice, zeros elsewhere.
        let cfg = NetConfig::new(2, vec![]).with_time_freqs(4);
        let mut net = VelocityNet::zeros(cfg).unwrap();
        let cols = net.layers[0].cols;
        net.layers[0].w[0] = 1.0;
        net.layers[0].w[cols + 1] = 1.0;
        for t in [0.0, 0.25, 0.9] {
            let out = net.forward(&[1.0, 2.0], t, None).unwrap();
            assert_eq!(out, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn forward_deterministic() {
        let mut rng = RngState::new(99);
        let net = VelocityNet::init(small_cfg(), &mut rng).unwrap();
        let a = net.forward(&[0.1, 0.2], 0.7, Some(&[0.0, 1.0, 0.5])).unwrap();
        let b = net.forward(&[0.1, 0.2], 0.7, Some(&[0.0, 1.0, 0.5])).unwrap();
        assert_eq!(a, b);
        // Same seed reconstructs the same net bit for bit.
        let net2 = VelocityNet::init(small_cfg(), &mut RngState::new(99)).unwrap();
        assert_eq!(net.flat_params(), net2.flat_params());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let net = VelocityNet::zeros(small_cfg()).unwrap();
        assert!(net.forward(&[1.0], 0.5, Some(&[0.0, 0.0, 0.0])).is_err());
        assert!(net.forward(&[1.0, 2.0], 0.5, None).is_err());
        assert!(net.forward(&[1.0, 2.0], 1.5, Some(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn zero_net_quadratic_loss_gradients() {
        // loss = ||f(x)||^2 with a zero network: output-layer bias gradient
        // is 2*output = 0, hidden weight gradients 0.
        let net = VelocityNet::zeros(small_cfg()).unwrap();
        let (out, trace) = net.forward_traced(&[1.0, 1.0], 0.5, Some(&[1.0, 1.0, 1.0])).unwrap();
        let d_out: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut grads = GradientBuffer::zeros_like(&net);
        net.backward(&trace, &d_out, None, &mut grads).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn hand_chain_rule_scalar() {
        // 1-layer linear net, loss (W x - y)^2, W = 2, x = 3, y = 1:
        // dL/dW = 2 (6 - 1) * 3 = 30.
        let cfg = NetConfig { state_dim: 1, hidden: vec![], cond_dim: 0, time_freqs: 0 };
        let mut net = VelocityNet::zeros(cfg).unwrap();
        net.layers[0].w[0] = 2.0;
        let (out, trace) = net.forward_traced(&[3.0], 0.0, None).unwrap();
        let d_out = vec![2.0 * (out[0] - 1.0)];
        let mut grads = GradientBuffer::zeros_like(&net);
        net.backward(&trace, &d_out, None, &mut grads).unwrap();
        assert_eq!(grads.layers[0].w[0], 30.0);
        assert_eq!(grads.layers[0].b[0], 10.0);
    }

    /// Finite-difference oracle for the full network including time features,
    /// condition inputs, and hidden-activation loss terms.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngState::new(2024);
        let cfg = NetConfig::new(3, vec![10, 10]).with_cond(2);
        let net = VelocityNet::init(cfg, &mut rng).unwrap();
        assert!(net.param_count() <= 1000);
        let x = [0.3, -0.8, 1.2];
        let cond = [0.5, -0.25];
        let target = [1.0, 0.0, -1.0];
        let t = 0.37;

        let loss = |m: &VelocityNet| -> Result<f64> {
            let out = m.forward(&x, t, Some(&cond))?;
            Ok(out.iter().zip(&target).map(|(o, y)| (o - y) * (o - y)).sum())
        };
        let analytic = |m: &VelocityNet| -> Result<Vec<f64>> {
            let (out, trace) = m.forward_traced(&x, t, Some(&cond))?;
            let d_out: Vec<f64> = out.iter().zip(&target).map(|(o, y)| 2.0 * (o - y)).collect();
            let mut g = GradientBuffer::zeros_like(m);
            m.backward(&trace, &d_out, None, &mut g)?;
            Ok(g.to_flat())
        };
        let err = grad_check(&net, loss, analytic, 1e-5).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn hidden_injection_matches_finite_differences() {
        // Loss touching a hidden activation: sum of squares of hidden layer 0.
        let mut rng = RngState::new(5);
        let net = VelocityNet::init(NetConfig::new(2, vec![6, 6]), &mut rng).unwrap();
        let x = [0.4, -0.9];
        // Avoid t values where sin(2 pi 2^k t) is a mathematical zero: the
        // analytic gradient then carries only float residue (~1e-16) while
        // finite differences see exactly 0, which the 1e-12 relative floor
        // amplifies.
        let t = 0.37;
        let loss = |m: &VelocityNet| -> Result<f64> {
            let (_, tr) = m.forward_traced(&x, t, None)?;
            Ok(tr.hidden(0).iter().map(|v| v * v).sum())
        };
        let analytic = |m: &VelocityNet| -> Result<Vec<f64>> {
            let (_, tr) = m.forward_traced(&x, t, None)?;
            let mut dh = vec![vec![0.0; 6], vec![0.0; 6]];
            for (d, h) in dh[0].iter_mut().zip(tr.hidden(0)) {
                *d = 2.0 * h;
            }
            let mut g = GradientBuffer::zeros_like(m);
            m.backward(&tr, &[0.0, 0.0], Some(&dh), &mut g)?;
            Ok(g.to_flat())
        };
        let err = grad_check(&net, loss, analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = RngState::new(6);
        let net = VelocityNet::init(NetConfig::new(2, vec![7]), &mut rng).unwrap();
        let t = 0.25;
        let loss_at = |m: &VelocityNet, x: &[f64]| -> f64 {
            let out = m.forward(x, t, None).unwrap();
            out.iter().map(|v| v * v).sum()
        };
        let x = [0.3, 0.7];
        let (out, trace) = net.forward_traced(&x, t, None).unwrap();
        let d_out: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut g = GradientBuffer::zeros_like(&net);
        let dx = net.backward(&trace, &d_out, None, &mut g).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss_at(&net, &xp) - loss_at(&net, &xm)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-7, "dx[{i}]: {} vs {}", dx[i], fd);
        }
    }

    #[test]
    fn grad_check_constant_loss_is_zero() {
        let net = VelocityNet::zeros(small_cfg()).unwrap();
        let err = grad_check(
            &net,
            |_| Ok(1.0),
            |m| Ok(vec![0.0; m.num_params()]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_quadratic_tight() {
        // Quadratic loss on a linear net: FD error is O(h^2) only.
        let cfg = NetConfig { state_dim: 2, hidden: vec![], cond_dim: 0, time_freqs: 0 };
        let mut rng = RngState::new(8);
        let net = VelocityNet::init(cfg, &mut rng).unwrap();
        let x = [1.0, -2.0];
        let loss = |m: &VelocityNet| -> Result<f64> {
            let out = m.forward(&x, 0.0, None)?;
            Ok(out.iter().map(|v| v * v).sum())
        };
        let analytic = |m: &VelocityNet| -> Result<Vec<f64>> {
            let (out, tr) = m.forward_traced(&x, 0.0, None)?;
            let d: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
            let mut g = GradientBuffer::zeros_like(m);
            m.backward(&tr, &d, None, &mut g)?;
            Ok(g.to_flat())
        };
        let err = grad_check(&net, loss, analytic, 1e-5).unwrap();
        assert!(err <= 1e-8, "quadratic loss error {err}");
    }

    #[test]
    fn grad_check_rejects_non_finite_loss() {
        let net = VelocityNet::zeros(small_cfg()).unwrap();
        let r = grad_check(&net, |_| Ok(f64::NAN), |m| Ok(vec![0.0; m.num_params()]), 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
