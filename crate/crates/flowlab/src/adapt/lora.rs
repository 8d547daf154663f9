//! Low-rank adapters: per adapted layer, factors A (rows x r) and B
//! (r x cols) so that forward passes use the effective weight
//! W + (alpha/r) A B. Only A and B train; the base network is never touched.

use crate::error::{Error, Result};
use crate::net::{ForwardTrace, ParamVector, VelocityNet};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerAdapter {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    /// rows x rank, row-major.
    pub a: Vec<f64>,
    /// rank x cols, row-major.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub(crate) layers: Vec<LayerAdapter>,
}

impl AdapterSet {
    /// Standard init: A Gaussian (scaled by 1/sqrt(rank)), B zero, so fresh
    /// adapters are exactly neutral.
    pub fn init(net: &VelocityNet, adapted_layers: &[usize], rank: usize, alpha: f64, rng: &mut RngState) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("adapter rank must be >= 1"));
        }
        let dims = net.config().layer_dims();
        let mut layers = Vec::with_capacity(adapted_layers.len());
        for &l in adapted_layers {
            let (rows, cols) = *dims
                .get(l)
                .ok_or_else(|| Error::config(format!("adapted layer {l} out of range ({} layers)", dims.len())))?;
            let scale = 1.0 / (rank as f64).sqrt();
            let a: Vec<f64> = (0..rows * rank).map(|_| scale * rng.next_normal()).collect();
            let b = vec![0.0; rank * cols];
            layers.push(LayerAdapter { layer: l, rows, cols, a, b });
        }
        Ok(AdapterSet { rank, alpha, layers })
    }

    /// Default placement: every hidden layer (all layers except the output).
    pub fn hidden_layers(net: &VelocityNet) -> Vec<usize> {
        (0..net.n_layers().saturating_sub(1)).collect()
    }

    /// Trainable parameter count: sum over layers of rank (rows + cols).
    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(|l| self.rank * (l.rows + l.cols)).sum()
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    fn find(&self, layer: usize) -> Option<&LayerAdapter> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Materialize the adapted network: W_l + (alpha/r) A_l B_l. Used for
    /// equivalence tests and cheap repeated inference.
    pub fn merged_net(&self, base: &VelocityNet) -> VelocityNet {
        let mut net = base.clone();
        let s = self.alpha / self.rank as f64;
        for ad in &self.layers {
            let w = &mut net.layers_mut()[ad.layer].w;
            for r in 0..ad.rows {
                for c in 0..ad.cols {
                    let mut acc = 0.0;
                    for k in 0..self.rank {
                        acc += ad.a[r * self.rank + k] * ad.b[k * ad.cols + c];
                    }
                    w[r * ad.cols + c] += s * acc;
                }
            }
        }
        net
    }
}

/// Gradient accumulator for adapter factors only; the base network has no
/// gradient storage here at all.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub(crate) layers: Vec<LayerAdapter>,
}

impl AdapterGrads {
    pub fn zeros_like(adapters: &AdapterSet) -> Self {
        AdapterGrads {
            layers: adapters
                .layers
                .iter()
                .map(|l| LayerAdapter {
                    layer: l.layer,
                    rows: l.rows,
                    cols: l.cols,
                    a: vec![0.0; l.a.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.a);
            out.extend_from_slice(&l.b);
        }
        out
    }
}

/// Trace of an adapted forward pass: the base-trace structure plus the
/// low-rank intermediates u = B x per adapted layer.
pub struct LoraTrace {
    pub(crate) base: ForwardTrace,
    /// Keyed by layer index; u vectors for adapted layers.
    pub(crate) u: Vec<(usize, Vec<f64>)>,
    /// Layer inputs (embedded input for layer 0, hidden activations after).
    pub(crate) inputs: Vec<Vec<f64>>,
}

impl LoraTrace {
    pub fn output(&self) -> &[f64] {
        self.base.output()
    }

    pub fn hidden(&self, l: usize) -> &[f64] {
        self.base.hidden(l)
    }

    pub fn n_hidden(&self) -> usize {
        self.base.n_hidden()
    }
}

/// Forward pass with effective weights W + (alpha/r) A B; base untouched.
pub fn lora_forward(base: &VelocityNet, adapters: &AdapterSet, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
    Ok(lora_forward_traced(base, adapters, x, t, cond)?.0)
}

pub fn lora_forward_traced(
    base: &VelocityNet,
    adapters: &AdapterSet,
    x: &[f64],
    t: f64,
    cond: Option<&[f64]>,
) -> Result<(Vec<f64>, LoraTrace)> {
    // Reuse the base embedding by running a zero-layer forward manually.
    let embedded = base.embed_input(x, t, cond)?;
    let n_layers = base.n_layers();
    let s = adapters.alpha / adapters.rank as f64;
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut inputs = Vec::with_capacity(n_layers);
    let mut us = Vec::new();
    let mut cur = embedded.clone();
    for li in 0..n_layers {
        let layer = &base.layers()[li];
        inputs.push(cur.clone());
        let mut a_pre = vec![0.0; layer.rows];
        layer.matvec(&cur, &mut a_pre);
        if let Some(ad) = adapters.find(li) {
            let r = adapters.rank;
            let mut u = vec![0.0; r];
            for k in 0..r {
                let row = &ad.b[k * ad.cols..(k + 1) * ad.cols];
                u[k] = row.iter().zip(&cur).map(|(b, x)| b * x).sum();
            }
            for (rr, av) in a_pre.iter_mut().enumerate() {
                let arow = &ad.a[rr * r..(rr + 1) * r];
                let add: f64 = arow.iter().zip(&u).map(|(a, u)| a * u).sum();
                *av += s * add;
            }
            us.push((li, u));
        }
        if li + 1 < n_layers {
            let h: Vec<f64> = a_pre.iter().map(|&v| crate::net::silu(v)).collect();
            cur = h.clone();
            pre.push(a_pre);
            post.push(h);
        } else {
            pre.push(a_pre.clone());
            cur = a_pre;
        }
    }
    let trace = LoraTrace {
        base: ForwardTrace::from_parts(embedded, pre, post),
        u: us,
        inputs,
    };
    Ok((cur, trace))
}

/// Reverse pass: gradients flow only into the adapter factors. Returns
/// dL/dx over the state slice. Optional `d_hidden[l]` injects loss gradients
/// at hidden activations (for activation-alignment losses).
pub fn lora_backward(
    base: &VelocityNet,
    adapters: &AdapterSet,
    trace: &LoraTrace,
    d_out: &[f64],
    d_hidden: Option<&[Vec<f64>]>,
    grads: &mut AdapterGrads,
) -> Result<Vec<f64>> {
    let n_layers = base.n_layers();
    let state_dim = base.config().state_dim;
    if d_out.len() != state_dim {
        return Err(Error::shape(format!("{state_dim}"), format!("{}", d_out.len()), "lora_backward d_out"));
    }
    let s = adapters.alpha / adapters.rank as f64;
    let mut delta = d_out.to_vec();
    for li in (0..n_layers).rev() {
        let layer = &base.layers()[li];
        let input = &trace.inputs[li];
        let mut d_in = vec![0.0; layer.cols];
        layer.matvec_t_acc(&delta, &mut d_in);
        if let Some(pos) = adapters.layers.iter().position(|l| l.layer == li) {
            let ad = &adapters.layers[pos];
            let g = &mut grads.layers[pos];
            let r = adapters.rank;
            let u = &trace.u.iter().find(|(l, _)| *l == li).expect("trace has adapted layer").1;
            // v = A^T delta (rank vector)
            let mut v = vec![0.0; r];
            for rr in 0..ad.rows {
                let d = delta[rr];
                let arow = &ad.a[rr * r..(rr + 1) * r];
                for (vk, ak) in v.iter_mut().zip(arow) {
                    *vk += ak * d;
                }
            }
            // dA += s * delta (x) u^T ; dB += s * v (x) input^T ;
            // d_in += s * B^T v.
            for rr in 0..ad.rows {
                let d = s * delta[rr];
                let garow = &mut g.a[rr * r..(rr + 1) * r];
                for (gv, uv) in garow.iter_mut().zip(u) {
                    *gv += d * uv;
                }
            }
            for k in 0..r {
                let vs = s * v[k];
                let gbrow = &mut g.b[k * ad.cols..(k + 1) * ad.cols];
                for (gv, xv) in gbrow.iter_mut().zip(input) {
                    *gv += vs * xv;
                }
                let brow = &ad.b[k * ad.cols..(k + 1) * ad.cols];
                for (din, bv) in d_in.iter_mut().zip(brow) {
                    *din += vs * bv;
                }
            }
        }
        if li > 0 {
            if let Some(dh) = d_hidden {
                for (v, add) in d_in.iter_mut().zip(&dh[li - 1]) {
                    *v += add;
                }
            }
            let pre_prev = &trace.base.pre_activations(li - 1);
            delta = d_in.iter().zip(pre_prev.iter()).map(|(d, a)| d * crate::net::silu_prime(*a)).collect();
        } else {
            return Ok(d_in[..state_dim].to_vec());
        }
    }
    unreachable!()
}

/// Owned (base, adapters) pair whose flat-parameter view is the adapter
/// factors only; lets the generic gradient checker probe adapter gradients.
#[derive(Clone)]
pub struct LoraModel {
    pub base: VelocityNet,
    pub adapters: AdapterSet,
}

impl ParamVector for LoraModel {
    fn num_params(&self) -> usize {
        self.adapters.trainable_count()
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.adapters.layers {
            out.extend_from_slice(&l.a);
            out.extend_from_slice(&l.b);
        }
        out
    }

    fn set_flat_params(&mut self, p: &[f64]) {
        let mut off = 0;
        for l in &mut self.adapters.layers {
            let na = l.a.len();
            l.a.copy_from_slice(&p[off..off + na]);
            off += na;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        assert_eq!(off, p.len(), "adapter flat length");
    }
}

/// Batched adapted forward as a velocity field.
pub struct LoraField<'a> {
    pub base: &'a VelocityNet,
    pub adapters: &'a AdapterSet,
}

impl crate::flow::VelocityField for LoraField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..x.n_rows())
            .map(|i| lora_forward(self.base, self.adapters, x.row(i), t, cond.map(|c| c.row(i))))
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{grad_check, NetConfig};

    fn setup() -> (VelocityNet, AdapterSet) {
        let mut rng = RngState::new(31);
        let base = VelocityNet::init(NetConfig::new(3, vec![10, 8]).with_cond(2), &mut rng).unwrap();
        let layers = AdapterSet::hidden_layers(&base);
        let adapters = AdapterSet::init(&base, &layers, 4, 4.0, &mut rng).unwrap();
        (base, adapters)
    }

    #[test]
    fn zero_b_is_bitwise_neutral() {
        let (base, adapters) = setup();
        let x = [0.3, -0.4, 1.1];
        let cond = [1.0, 0.0];
        for t in [0.0, 0.33, 0.9] {
            let plain = base.forward(&x, t, Some(&cond)).unwrap();
            let adapted = lora_forward(&base, &adapters, &x, t, Some(&cond)).unwrap();
            assert_eq!(plain, adapted);
        }
    }

    #[test]
    fn trainable_count_law() {
        let (base, adapters) = setup();
        let dims = base.config().layer_dims();
        let expected: usize = adapters
            .adapted_layers()
            .iter()
            .map(|&l| 4 * (dims[l].0 + dims[l].1))
            .sum();
        assert_eq!(adapters.trainable_count(), expected);
        let lm = LoraModel { base, adapters };
        assert_eq!(lm.flat_params().len(), lm.num_params());
    }

    #[test]
    fn full_rank_factorization_equals_full_finetune() {
        // r = min(rows, cols), alpha = r, A B = Delta W: the adapted forward
        // equals a net with W + Delta W.
        let mut rng = RngState::new(5);
        let base = VelocityNet::init(NetConfig::new(2, vec![6]), &mut rng).unwrap();
        let dims = base.config().layer_dims();
        let (rows, cols) = dims[0];
        let r = rows.min(cols);
        let mut adapters = AdapterSet::init(&base, &[0], r, r as f64, &mut rng).unwrap();
        for v in adapters.layers[0].a.iter_mut() {
            *v = rng.uniform_in(-0.5, 0.5);
        }
        for v in adapters.layers[0].b.iter_mut() {
            *v = rng.uniform_in(-0.5, 0.5);
        }
        let merged = adapters.merged_net(&base);
        let x = [0.7, -1.2];
        for t in [0.1, 0.6] {
            let a = lora_forward(&base, &adapters, &x, t, None).unwrap();
            let b = merged.forward(&x, t, None).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let (base, mut adapters) = setup();
        // Non-trivial B so gradients flow everywhere.
        let mut rng = RngState::new(71);
        for l in &mut adapters.layers {
            for v in l.b.iter_mut() {
                *v = 0.1 * rng.next_normal();
            }
        }
        let model = LoraModel { base, adapters };
        let x = [0.4, 0.2, -0.9];
        let cond = [0.0, 1.0];
        let target = [0.5, -0.5, 1.0];
        let t = 0.41;
        let loss = |m: &LoraModel| -> crate::error::Result<f64> {
            let out = lora_forward(&m.base, &m.adapters, &x, t, Some(&cond))?;
            Ok(out.iter().zip(&target).map(|(o, y)| (o - y) * (o - y)).sum())
        };
        let analytic = |m: &LoraModel| -> crate::error::Result<Vec<f64>> {
            let (out, tr) = lora_forward_traced(&m.base, &m.adapters, &x, t, Some(&cond))?;
            let d: Vec<f64> = out.iter().zip(&target).map(|(o, y)| 2.0 * (o - y)).collect();
            let mut g = AdapterGrads::zeros_like(&m.adapters);
            lora_backward(&m.base, &m.adapters, &tr, &d, None, &mut g)?;
            Ok(g.to_flat())
        };
        let err = grad_check(&model, loss, analytic, 1e-5).unwrap();
        assert!(err <= 1e-5, "adapter grad check {err}");
    }

    #[test]
    fn hidden_injection_gradients_match_finite_differences() {
        let (base, mut adapters) = setup();
        let mut rng = RngState::new(72);
        for l in &mut adapters.layers {
            for v in l.b.iter_mut() {
                *v = 0.1 * rng.next_normal();
            }
        }
        let model = LoraModel { base, adapters };
        let x = [0.4, 0.2, -0.9];
        let cond = [0.0, 1.0];
        let t = 0.23;
        // Loss on hidden activation 1.
        let loss = |m: &LoraModel| -> crate::error::Result<f64> {
            let (_, tr) = lora_forward_traced(&m.base, &m.adapters, &x, t, Some(&cond))?;
            Ok(tr.hidden(1).iter().map(|v| v * v).sum())
        };
        let analytic = |m: &LoraModel| -> crate::error::Result<Vec<f64>> {
            let (_, tr) = lora_forward_traced(&m.base, &m.adapters, &x, t, Some(&cond))?;
            let mut dh = vec![vec![0.0; 10], vec![0.0; 8]];
            for (d, h) in dh[1].iter_mut().zip(tr.hidden(1)) {
                *d = 2.0 * h;
            }
            let mut g = AdapterGrads::zeros_like(&m.adapters);
            lora_backward(&m.base, &m.adapters, &tr, &[0.0; 3], Some(&dh), &mut g)?;
            Ok(g.to_flat())
        };
        let err = grad_check(&model, loss, analytic, 1e-5).unwrap();
        assert!(err <= 1e-5, "hidden-injection adapter grad check {err}");
    }

    #[test]
    fn input_gradient_through_adapters() {
        let (base, mut adapters) = setup();
        let mut rng = RngState::new(73);
        for l in &mut adapters.layers {
            for v in l.b.iter_mut() {
                *v = 0.2 * rng.next_normal();
            }
        }
        let cond = [0.5, 0.5];
        let t = 0.61;
        let x = [0.1, -0.2, 0.3];
        let loss_at = |x: &[f64]| -> f64 {
            let out = lora_forward(&base, &adapters, x, t, Some(&cond)).unwrap();
            out.iter().map(|v| v * v).sum()
        };
        let (out, tr) = lora_forward_traced(&base, &adapters, &x, t, Some(&cond)).unwrap();
        let d: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut g = AdapterGrads::zeros_like(&adapters);
        let dx = lora_backward(&base, &adapters, &tr, &d, None, &mut g).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss_at(&xp) - loss_at(&xm)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-7, "dx[{i}] {} vs {}", dx[i], fd);
        }
    }
}
