//! Elastic weight consolidation: a diagonal Fisher estimate on the anchor
//! task, a parameter snapshot, and the quadratic penalty that anchors
//! fine-tuning to it.

use crate::error::{Error, Result};
use crate::net::{GradientBuffer, ParamVector, VelocityNet};

#[derive(Debug, Clone)]
pub struct EwcState {
    /// Anchor parameters theta*, flat.
    pub anchor: Vec<f64>,
    /// Diagonal Fisher estimate, flat, entries >= 0.
    pub fisher: Vec<f64>,
    /// Penalty strength lambda.
    pub lambda: f64,
    /// Per-layer gate: true = fully unfrozen (exempt from the penalty);
    /// false = anchored by the penalty. The lowest-Fisher quartile of layers
    /// is unfrozen by [`EwcState::from_fisher`].
    pub unfrozen: Vec<bool>,
    /// Flat parameter extents per layer, for the layer gating.
    layer_spans: Vec<(usize, usize)>,
}

/// Empirical diagonal Fisher: the mean over batches of squared
/// per-parameter gradients of the anchor loss.
pub fn empirical_fisher<F>(net: &VelocityNet, n_batches: usize, mut grad_of_batch: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &VelocityNet) -> Result<GradientBuffer>,
{
    if n_batches == 0 {
        return Err(Error::config("empirical_fisher: n_batches must be >= 1"));
    }
    let mut fisher = vec![0.0; net.param_count()];
    for b in 0..n_batches {
        let g = grad_of_batch(b, net)?.to_flat();
        if g.len() != fisher.len() {
            return Err(Error::shape(
                format!("{}", fisher.len()),
                format!("{}", g.len()),
                "empirical_fisher",
            ));
        }
        for (f, gi) in fisher.iter_mut().zip(&g) {
            *f += gi * gi;
        }
    }
    fisher.iter_mut().for_each(|f| *f /= n_batches as f64);
    Ok(fisher)
}

impl EwcState {
    /// Snapshot the anchor parameters and gate layers: the lowest quartile
    /// of layers by mean Fisher is fully unfrozen, the rest are penalized.
    pub fn from_fisher(net: &VelocityNet, fisher: Vec<f64>, lambda: f64) -> Result<Self> {
        if fisher.len() != net.param_count() {
            return Err(Error::shape(
                format!("{}", net.param_count()),
                format!("{}", fisher.len()),
                "EwcState::from_fisher",
            ));
        }
        if fisher.iter().any(|f| *f < 0.0 || !f.is_finite()) {
            return Err(Error::numeric("Fisher entries must be finite and nonnegative"));
        }
        if lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        let dims = net.config().layer_dims();
        let mut spans = Vec::with_capacity(dims.len());
        let mut off = 0;
        for (r, c) in &dims {
            let n = r * c + r;
            spans.push((off, off + n));
            off += n;
        }
        let mut layer_means: Vec<(f64, usize)> = spans
            .iter()
            .enumerate()
            .map(|(l, (a, b))| (fisher[*a..*b].iter().sum::<f64>() / (b - a) as f64, l))
            .collect();
        layer_means.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite fisher"));
        let n_layers = dims.len();
        let n_unfrozen = (n_layers / 4).max(1);
        let mut unfrozen = vec![false; n_layers];
        for (_, l) in layer_means.iter().take(n_unfrozen) {
            unfrozen[*l] = true;
        }
        Ok(EwcState {
            anchor: net.flat_params(),
            fisher,
            lambda,
            unfrozen,
            layer_spans: spans,
        })
    }

    /// State with every layer penalized; used when the quartile gate is not
    /// wanted (and by the arithmetic oracle tests).
    pub fn all_penalized(net: &VelocityNet, fisher: Vec<f64>, lambda: f64) -> Result<Self> {
        let mut s = Self::from_fisher(net, fisher, lambda)?;
        s.unfrozen.iter_mut().for_each(|u| *u = false);
        Ok(s)
    }

    fn penalized(&self, idx: usize) -> bool {
        for (l, (a, b)) in self.layer_spans.iter().enumerate() {
            if idx >= *a && idx < *b {
                return !self.unfrozen[l];
            }
        }
        true
    }

    /// (lambda / 2) sum_i F_i (theta_i - theta*_i)^2 over penalized layers.
    pub fn penalty(&self, params: &[f64]) -> Result<f64> {
        if params.len() != self.anchor.len() {
            return Err(Error::shape(
                format!("{}", self.anchor.len()),
                format!("{}", params.len()),
                "ewc_penalty",
            ));
        }
        let mut acc = 0.0;
        for (l, (a, b)) in self.layer_spans.iter().enumerate() {
            if self.unfrozen[l] {
                continue;
            }
            for i in *a..*b {
                let d = params[i] - self.anchor[i];
                acc += self.fisher[i] * d * d;
            }
        }
        Ok(0.5 * self.lambda * acc)
    }

    /// Gradient of the penalty: lambda F_i (theta_i - theta*_i), zero on
    /// unfrozen layers.
    pub fn penalty_grad(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.anchor.len() {
            return Err(Error::shape(
                format!("{}", self.anchor.len()),
                format!("{}", params.len()),
                "ewc_penalty_grad",
            ));
        }
        Ok((0..params.len())
            .map(|i| {
                if self.penalized(i) {
                    self.lambda * self.fisher[i] * (params[i] - self.anchor[i])
                } else {
                    0.0
                }
            })
            .collect())
    }
}

/// Free-function form of the penalty.
pub fn ewc_penalty(net: &VelocityNet, state: &EwcState) -> Result<f64> {
    state.penalty(&net.flat_params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::rng::RngState;

    #[test]
    fn zero_gradient_loss_gives_zero_fisher() {
        let net = VelocityNet::zeros(NetConfig::new(1, vec![4])).unwrap();
        let f = empirical_fisher(&net, 3, |_, n| Ok(GradientBuffer::zeros_like(n))).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_model_hand_fisher() {
        // Scalar model, loss (w x - y)^2, sample (x=1, y=0, w=1):
        // dL/dw = 2 w x^2 = 2, so F = 4.
        let cfg = NetConfig { state_dim: 1, hidden: vec![], cond_dim: 0, time_freqs: 0 };
        let mut net = VelocityNet::zeros(cfg).unwrap();
        net.set_flat_params(&[1.0, 0.0]);
        let f = empirical_fisher(&net, 1, |_, n| {
            let (out, tr) = n.forward_traced(&[1.0], 0.0, None)?;
            let d = vec![2.0 * (out[0] - 0.0)];
            let mut g = GradientBuffer::zeros_like(n);
            n.backward(&tr, &d, None, &mut g)?;
            Ok(g)
        })
        .unwrap();
        assert_eq!(f[0], 4.0);
    }

    #[test]
    fn fisher_invariant_to_batch_order() {
        let mut rng = RngState::new(2);
        let net = VelocityNet::init(NetConfig::new(2, vec![6]), &mut rng).unwrap();
        let points: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.next_normal(), rng.next_normal()]).collect();
        let grad_for = |p: &[f64], n: &VelocityNet| {
            let (out, tr) = n.forward_traced(p, 0.3, None).unwrap();
            let d: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
            let mut g = GradientBuffer::zeros_like(n);
            n.backward(&tr, &d, None, &mut g).unwrap();
            g
        };
        let f_fwd = empirical_fisher(&net, 4, |b, n| Ok(grad_for(&points[b], n))).unwrap();
        let f_rev = empirical_fisher(&net, 4, |b, n| Ok(grad_for(&points[3 - b], n))).unwrap();
        for (a, b) in f_fwd.iter().zip(&f_rev) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn penalty_zero_at_anchor_and_quadratic() {
        // 2-parameter model, F = 1 everywhere, lambda = 1:
        // theta - theta* = (1, 1) gives penalty 1; doubling quadruples it.
        let cfg = NetConfig { state_dim: 1, hidden: vec![], cond_dim: 0, time_freqs: 0 };
        let net = VelocityNet::zeros(cfg).unwrap();
        let state = EwcState::all_penalized(&net, vec![1.0, 1.0], 1.0).unwrap();
        assert_eq!(state.penalty(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(state.penalty(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(state.penalty(&[2.0, 2.0]).unwrap(), 4.0);
        // Gradient: lambda F (theta - theta*).
        assert_eq!(state.penalty_grad(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn quartile_gate_unfreezes_lowest_fisher_layer() {
        let mut rng = RngState::new(4);
        let net = VelocityNet::init(NetConfig::new(2, vec![4, 4, 4]), &mut rng).unwrap();
        // Hand-build a Fisher with tiny values on layer 2.
        let dims = net.config().layer_dims();
        let mut fisher = Vec::new();
        for (l, (r, c)) in dims.iter().enumerate() {
            let v = if l == 2 { 1e-6 } else { 1.0 };
            fisher.extend(std::iter::repeat(v).take(r * c + r));
        }
        let state = EwcState::from_fisher(&net, fisher, 10.0).unwrap();
        assert!(state.unfrozen[2]);
        assert_eq!(state.unfrozen.iter().filter(|u| **u).count(), 1);
        // Perturbing the unfrozen layer is free; penalized layers are not.
        let mut p = net.flat_params();
        let spans_start: usize = dims[..2].iter().map(|(r, c)| r * c + r).sum();
        let span_len = dims[2].0 * dims[2].1 + dims[2].0;
        for v in p[spans_start..spans_start + span_len].iter_mut() {
            *v += 5.0;
        }
        assert_eq!(state.penalty(&p).unwrap(), 0.0);
        p[0] += 1.0;
        assert!(state.penalty(&p).unwrap() > 0.0);
    }
}
