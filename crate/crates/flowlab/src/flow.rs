//! Rectified-flow training, Euler ODE sampling, reflow re-pairing, and
//! trajectory-straightness measurement.
//!
//! Convention: the prior lives at t = 0 and the target at t = 1. (The staged
//! fine-tuning in [`crate::adapt`] uses the opposite convention and documents
//! the conversion t -> 1 - t.)

use crate::dist::DistributionSpec;
use crate::error::{Error, Result};
use crate::net::{GradientBuffer, VelocityNet};
use crate::opt::OptimizerState;
use crate::rng::RngState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// A coupled batch of prior and target draws, rows aligned.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub cond: Option<Tensor>,
}

impl PairBatch {
    pub fn new(x0: Tensor, x1: Tensor, cond: Option<Tensor>) -> Result<Self> {
        if x0.n_rows() != x1.n_rows() || x0.row_len() != x1.row_len() {
            return Err(Error::shape(
                format!("{:?}", x0.shape()),
                format!("{:?}", x1.shape()),
                "PairBatch",
            ));
        }
        if let Some(c) = &cond {
            if c.n_rows() != x0.n_rows() {
                return Err(Error::shape(
                    format!("{} rows", x0.n_rows()),
                    format!("{} rows", c.n_rows()),
                    "PairBatch cond",
                ));
            }
        }
        Ok(PairBatch { x0, x1, cond })
    }

    pub fn len(&self) -> usize {
        self.x0.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.row_len()
    }

    fn cond_row(&self, i: usize) -> Option<&[f64]> {
        self.cond.as_ref().map(|c| c.row(i))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        if steps == 0 || batch_size == 0 {
            return Err(Error::config("steps and batch size must be >= 1"));
        }
        Ok(TrainConfig { steps, batch_size, learning_rate, seed })
    }
}

/// Linear interpolation x_t = (1 - t) x0 + t x1.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(format!("{:?}", x0.shape()), format!("{:?}", x1.shape()), "interpolate"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("time {t} outside [0,1]")));
    }
    Ok(x0.scale(1.0 - t).add(&x1.scale(t))?)
}

fn interp_row(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Mean squared flow-matching residual: mean_i ||(x1_i - x0_i) - v(x_t_i, t_i)||^2.
pub fn rf_loss(net: &VelocityNet, batch: &PairBatch, times: &[f64]) -> Result<f64> {
    let (loss, _) = rf_loss_grad_impl(net, batch, times, None, false)?;
    Ok(loss)
}

/// Loss plus parameter gradients for the same objective.
pub fn rf_loss_grad(net: &VelocityNet, batch: &PairBatch, times: &[f64]) -> Result<(f64, GradientBuffer)> {
    let (loss, g) = rf_loss_grad_impl(net, batch, times, None, true)?;
    Ok((loss, g.expect("gradients requested")))
}

/// Shared evaluation for the plain and corrected objectives: when
/// `correction` is given, row i's regression target becomes
/// (x1 - x0) - correction_i.
pub(crate) fn rf_loss_grad_impl(
    net: &VelocityNet,
    batch: &PairBatch,
    times: &[f64],
    correction: Option<&[Vec<f64>]>,
    want_grads: bool,
) -> Result<(f64, Option<GradientBuffer>)> {
    let n = batch.len();
    if times.len() != n {
        return Err(Error::shape(format!("{n}"), format!("{}", times.len()), "rf_loss times"));
    }
    let mut grads = want_grads.then(|| GradientBuffer::zeros_like(net));
    let mut loss = 0.0;
    for i in 0..n {
        let t = times[i];
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("time {t} outside [0,1]")));
        }
        let x0 = batch.x0.row(i);
        let x1 = batch.x1.row(i);
        let xt = interp_row(x0, x1, t);
        let (v, trace) = net.forward_traced(&xt, t, batch.cond_row(i))?;
        if v.iter().any(|u| !u.is_finite()) {
            return Err(Error::numeric(format!("non-finite network output at row {i}")));
        }
        let mut residual = Vec::with_capacity(v.len());
        for k in 0..v.len() {
            let mut target = x1[k] - x0[k];
            if let Some(c) = correction {
                target -= c[i][k];
            }
            residual.push(v[k] - target);
        }
        loss += residual.iter().map(|r| r * r).sum::<f64>();
        if let Some(g) = grads.as_mut() {
            let scale = 2.0 / n as f64;
            let d_out: Vec<f64> = residual.iter().map(|r| scale * r).collect();
            net.backward(&trace, &d_out, None, g)?;
        }
    }
    Ok((loss / n as f64, grads))
}

/// Per-step loss trace from a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTrace {
    pub seed: u64,
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn final_moving_average(&self, window: usize) -> f64 {
        let w = window.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64
    }

    /// Rows (step, value, seed) for CSV export.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), crate::exports::fmt_f64(*l), self.seed.to_string()])
            .collect()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        crate::exports::write_csv(path, &["step", "value", "seed"], &self.csv_rows())
    }
}

const DIVERGENCE_FACTOR: f64 = 1e3;
const DIVERGENCE_PATIENCE: usize = 100;

/// Minimize the flow-matching objective over fresh prior/target pairs.
///
/// Every step draws an independent coupling (x0, x1), samples times
/// uniformly on [0,1), and applies one adaptive-moment update. Errors with
/// [`Error::Divergence`] if the loss exceeds 1e3 x the initial loss for 100
/// consecutive steps.
pub fn train_rectified_flow(
    net: &mut VelocityNet,
    prior: &DistributionSpec,
    target: &DistributionSpec,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    prior.validate()?;
    target.validate()?;
    let root = RngState::new(cfg.seed);
    let mut opt = OptimizerState::new(net.param_count(), cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial = f64::NAN;
    let mut over = 0usize;
    for step in 0..cfg.steps {
        let mut rng_x0 = root.derive("flow.train.x0", step as u64);
        let mut rng_x1 = root.derive("flow.train.x1", step as u64);
        let mut rng_t = root.derive("flow.train.t", step as u64);
        let x0 = prior.sample(cfg.batch_size, &mut rng_x0)?;
        let x1 = target.sample(cfg.batch_size, &mut rng_x1)?;
        let times: Vec<f64> = (0..cfg.batch_size).map(|_| rng_t.uniform_in(0.0, 1.0)).collect();
        let batch = PairBatch::new(x0, x1, None)?;
        let (loss, grads) = rf_loss_grad(net, &batch, &times)?;
        if step == 0 {
            initial = loss;
        }
        if loss > DIVERGENCE_FACTOR * initial {
            over += 1;
            if over >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence { step, loss, initial });
            }
        } else {
            over = 0;
        }
        opt.step_net(net, &grads)?;
        losses.push(loss);
    }
    Ok(LossTrace { seed: cfg.seed, losses })
}

/// Anything that can be integrated as a velocity field. Batched evaluation
/// at a common time; conditions row-aligned with the batch.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor>;
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        let times = vec![t; x.n_rows()];
        self.forward_batch(x, &times, cond)
    }
}

/// Closure-backed field, used for oracle fields in tests and experiments.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    fn velocity(&self, x: &Tensor, t: f64, _cond: Option<&Tensor>) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..x.n_rows()).map(|i| (self.0)(x.row(i), t)).collect();
        Tensor::from_rows(&rows)
    }
}

/// Wrapper that counts network-function evaluations exactly (one per row per
/// call). NFE reports are populated from these counters, never estimated.
pub struct CountingField<'a, V: VelocityField + ?Sized> {
    inner: &'a V,
    count: AtomicU64,
}

impl<'a, V: VelocityField + ?Sized> CountingField<'a, V> {
    pub fn new(inner: &'a V) -> Self {
        CountingField { inner, count: AtomicU64::new(0) }
    }

    pub fn evaluations(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl<V: VelocityField + ?Sized> VelocityField for CountingField<'_, V> {
    fn velocity(&self, x: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        self.count.fetch_add(x.n_rows() as u64, Ordering::Relaxed);
        self.inner.velocity(x, t, cond)
    }
}

/// Explicit Euler over the uniform grid t_i = i / n_steps, velocity taken at
/// the left endpoint. Returns terminal states and the exact NFE count
/// (n_steps x batch rows).
pub fn euler_sample<V: VelocityField + ?Sized>(
    field: &V,
    x0: &Tensor,
    n_steps: usize,
    cond: Option<&Tensor>,
) -> Result<(Tensor, u64)> {
    if n_steps == 0 {
        return Err(Error::config("euler_sample: n_steps must be >= 1"));
    }
    let counted = CountingField::new(field);
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let v = counted
            .velocity(&x, t, cond)
            .map_err(|e| Error::numeric(format!("{e} at step {i}")))?
            .reshaped(x.shape().to_vec())?;
        x.axpy(dt, &v)?;
        if let Err(e) = x.check_finite("euler_sample") {
            return Err(Error::numeric(format!("{e} at step {i}")));
        }
    }
    Ok((x, counted.evaluations()))
}

/// The one-step map x0 + v(x0, 0): a single Euler step of size 1.
pub fn one_step_map<V: VelocityField + ?Sized>(field: &V, x0: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, u64)> {
    euler_sample(field, x0, 1, cond)
}

/// Re-pair the prior with the model's own transport: (x0, euler(x0)).
pub fn reflow_repair(
    net: &VelocityNet,
    prior: &DistributionSpec,
    n: usize,
    n_steps: usize,
    rng: &mut RngState,
) -> Result<PairBatch> {
    let x0 = prior.sample(n, rng)?;
    let (x1, _) = euler_sample(net, &x0, n_steps, None)?;
    PairBatch::new(x0, x1, None)
}

/// Mean over pairs and grid times of ||(x1 - x0) - v(x_t, t)||^2: zero iff
/// the field is exactly the straight-line displacement on these pairs.
pub fn straightness<V: VelocityField + ?Sized>(field: &V, pairs: &PairBatch, grid_size: usize) -> Result<f64> {
    if grid_size < 2 {
        return Err(Error::config("straightness: grid_size must be >= 2"));
    }
    let n = pairs.len();
    let mut acc = 0.0;
    for j in 0..grid_size {
        let t = j as f64 / (grid_size - 1) as f64;
        let xt = interpolate(&pairs.x0, &pairs.x1, t)?;
        let v = field.velocity(&xt, t, pairs.cond.as_ref())?;
        for i in 0..n {
            let (vr, x0r, x1r) = (v.row(i), pairs.x0.row(i), pairs.x1.row(i));
            acc += vr
                .iter()
                .enumerate()
                .map(|(k, vk)| {
                    let d = (x1r[k] - x0r[k]) - vk;
                    d * d
                })
                .sum::<f64>();
        }
    }
    Ok(acc / (n * grid_size) as f64)
}

/// Train on fresh independent couplings, then re-train a clone on its own
/// reflow pairs; returns (straightness before, straightness after) measured
/// on held-out prior draws.
pub fn reflow_round(
    prior: &DistributionSpec,
    target: &DistributionSpec,
    net_cfg: &crate::net::NetConfig,
    cfg: &TrainConfig,
    reflow_pairs: usize,
    sample_steps: usize,
) -> Result<(f64, f64)> {
    let root = RngState::new(cfg.seed);
    let mut net = VelocityNet::init(net_cfg.clone(), &mut root.derive("flow.init", 0))?;
    train_rectified_flow(&mut net, prior, target, cfg)?;

    let mut pair_rng = root.derive("flow.reflow.pairs", 0);
    let pairs = reflow_repair(&net, prior, reflow_pairs, sample_steps, &mut pair_rng)?;
    let before = straightness(&net, &pairs, 16)?;

    // Second round: train a fresh net on the model-coupled pairs.
    let mut net2 = VelocityNet::init(net_cfg.clone(), &mut root.derive("flow.init", 1))?;
    let mut opt = OptimizerState::new(net2.param_count(), cfg.learning_rate);
    let mut t_rng = root.derive("flow.reflow.t", 0);
    let mut idx_rng = root.derive("flow.reflow.idx", 0);
    for _ in 0..cfg.steps {
        let rows: Vec<usize> = (0..cfg.batch_size).map(|_| idx_rng.next_index(pairs.len())).collect();
        let x0 = Tensor::from_rows(&rows.iter().map(|&r| pairs.x0.row(r).to_vec()).collect::<Vec<_>>())?;
        let x1 = Tensor::from_rows(&rows.iter().map(|&r| pairs.x1.row(r).to_vec()).collect::<Vec<_>>())?;
        let mini = PairBatch::new(x0, x1, None)?;
        let times: Vec<f64> = (0..cfg.batch_size).map(|_| t_rng.uniform_in(0.0, 1.0)).collect();
        let (_, grads) = rf_loss_grad(&net2, &mini, &times)?;
        opt.step_net(&mut net2, &grads)?;
    }
    let mut eval_rng = root.derive("flow.reflow.eval", 0);
    let eval_pairs = reflow_repair(&net2, prior, reflow_pairs, sample_steps, &mut eval_rng)?;
    let after = straightness(&net2, &eval_pairs, 16)?;
    Ok((before, after))
}
