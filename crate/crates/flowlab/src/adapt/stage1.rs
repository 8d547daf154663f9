//! Stage 1: pretraining on conditional images with the composite loss.
//!
//! Conventions: stage time u has the data at u = 0 and pure noise at u = 1
//! (the flow module's convention flipped by u -> 1 - u). The diffusion loss
//! regresses the network on (eps - Z0), the forward-noising direction; the
//! reverse-time reconstruction therefore integrates the negated network
//! output.
//!
//! Each reverse step factors exactly through a posterior-mean (Tweedie)
//! refinement: with the model-implied clean-latent estimate
//! zhat0 = z + u * phi(z, u) and the conditional score
//! -(z - (1-u) zhat0) / u^2, the posterior mean at coefficient u^2 (the
//! rectified-linear schedule coefficient at the corresponding flow time) is
//! (1-u) zhat0, and re-noising that estimate to the next grid time
//! reproduces the plain reverse update bit for bit. The terminal state of
//! the chain is the final refined estimate itself.

use crate::adapt::ewc::EwcState;
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::metrics::{ssim, ssim_grad};
use crate::net::{GradientBuffer, VelocityNet};
use crate::opt::OptimizerState;
use crate::phantom::PhantomSample;
use crate::rng::RngState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Extra condition dimensions appended after the severity one-hot: the
/// organ-tag one-hot over the single-organ vocabulary.
pub const ORGAN_TAG: [f64; 1] = [1.0];
/// Pooled mask (64) + severity one-hot (4) + organ tag (1).
pub const STAGE_COND_DIM: usize = 69;

/// Condition vector for the staged models: pooled mask, severity one-hot,
/// organ tag.
pub fn stage_condition(sample: &PhantomSample) -> Vec<f64> {
    let mut c = crate::phantom::encode_condition(sample);
    c.extend_from_slice(&ORGAN_TAG);
    c
}

/// A batch for staged training: clean latents, mask features, prompt
/// features, true noise, and discrete times on the stage grid.
#[derive(Debug, Clone)]
pub struct StageBatch {
    /// Clean latents (flattened pixels), [n, d].
    pub z0: Tensor,
    /// Mask condition, [n, s].
    pub zs: Tensor,
    /// Prompt condition (severity one-hot + organ tag), [n, p].
    pub zp: Tensor,
    /// True noise, [n, d].
    pub eps: Tensor,
    /// Time indices on the grid 1..=t_max.
    pub t_idx: Vec<usize>,
    pub t_max: usize,
    /// Image side length (d = side^2) for pixel losses.
    pub image_side: usize,
}

impl StageBatch {
    pub fn len(&self) -> usize {
        self.z0.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.t_max as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t_idx[i] as f64 / self.t_max as f64
    }

    /// Combined condition row zs + zp.
    pub fn cond_row(&self, i: usize) -> Vec<f64> {
        let mut c = self.zs.row(i).to_vec();
        c.extend_from_slice(self.zp.row(i));
        c
    }

    pub fn cond_dim(&self) -> usize {
        self.zs.row_len() + self.zp.row_len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.eps.n_rows() != n || self.zs.n_rows() != n || self.zp.n_rows() != n || self.t_idx.len() != n {
            return Err(Error::config("stage batch: row count mismatch"));
        }
        if self.t_max == 0 {
            return Err(Error::config("stage batch: t_max must be >= 1"));
        }
        if self.t_idx.iter().any(|t| *t == 0 || *t > self.t_max) {
            return Err(Error::config("stage batch: time index off the grid"));
        }
        if self.image_side * self.image_side != self.z0.row_len() {
            return Err(Error::config("stage batch: image side does not square to latent dim"));
        }
        Ok(())
    }

    /// Draw a batch from phantom samples: fresh noise, uniform grid times.
    pub fn from_phantoms(samples: &[&PhantomSample], t_max: usize, rng: &mut RngState) -> Result<StageBatch> {
        if samples.is_empty() {
            return Err(Error::config("stage batch: no samples"));
        }
        let side = samples[0].size();
        let d = side * side;
        let mut z0 = Vec::new();
        let mut zs = Vec::new();
        let mut zp = Vec::new();
        let mut eps = vec![0.0; samples.len() * d];
        let mut t_idx = Vec::new();
        for s in samples {
            z0.push(s.image.data().to_vec());
            let c = crate::phantom::encode_condition(s);
            zs.push(c[..64].to_vec());
            let mut p = c[64..].to_vec();
            p.extend_from_slice(&ORGAN_TAG);
            zp.push(p);
            t_idx.push(1 + rng.next_index(t_max));
        }
        rng.fill_normal(&mut eps);
        Ok(StageBatch {
            z0: Tensor::from_rows(&z0)?,
            zs: Tensor::from_rows(&zs)?,
            zp: Tensor::from_rows(&zp)?,
            eps: Tensor::new(vec![samples.len(), d], eps)?,
            t_idx,
            t_max,
            image_side: side,
        })
    }
}

/// Forward noising P(Z_t | Z_0) = (1 - t) Z_0 + t eps (data at t = 0).
pub fn stage1_forward_noise(z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("time {t} outside [0,1]")));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!("{:?}", z0.shape()), format!("{:?}", eps.shape()), "stage1_forward_noise"));
    }
    Ok(z0.scale(1.0 - t).add(&eps.scale(t))?)
}

/// One reverse update Z_{t-1} = Z_t + dt * phi(Z_t, [Zs|Zp], t).
pub fn stage1_reverse_step<V: VelocityField + ?Sized>(
    field: &V,
    z_t: &Tensor,
    zs: &Tensor,
    zp: &Tensor,
    t: f64,
    dt: f64,
) -> Result<Tensor> {
    let cond = concat_cols(zs, zp)?;
    reverse_step_cond(field, z_t, Some(&cond), t, dt)
}

fn reverse_step_cond<V: VelocityField + ?Sized>(
    field: &V,
    z_t: &Tensor,
    cond: Option<&Tensor>,
    t: f64,
    dt: f64,
) -> Result<Tensor> {
    let v = field.velocity(z_t, t, cond)?.reshaped(z_t.shape().to_vec())?;
    let mut next = z_t.clone();
    next.axpy(dt, &v)?;
    next.check_finite("stage1_reverse_step")?;
    Ok(next)
}

pub(crate) fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.n_rows() != b.n_rows() {
        return Err(Error::shape(format!("{} rows", a.n_rows()), format!("{} rows", b.n_rows()), "concat"));
    }
    let rows: Vec<Vec<f64>> = (0..a.n_rows())
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.extend_from_slice(b.row(i));
            r
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Chain Eq.-4 updates from pure noise at u = 1 down to u = 0, evaluating
/// the field at the pre-update (upper) time.
pub fn stage1_reverse_chain<V: VelocityField + ?Sized>(
    field: &V,
    eps: &Tensor,
    cond: Option<&Tensor>,
    t_max: usize,
) -> Result<Tensor> {
    if t_max == 0 {
        return Err(Error::config("reverse chain: t_max must be >= 1"));
    }
    let dt = 1.0 / t_max as f64;
    let mut z = eps.clone();
    for k in 0..t_max {
        let u = (t_max - k) as f64 / t_max as f64;
        z = reverse_step_cond(field, &z, cond, u, dt)?;
    }
    Ok(z)
}

/// Posterior-mean refinement of a state: the model-implied clean-latent
/// estimate zhat0 = z + u phi(z, u) defines the conditional score
/// -(z - (1-u) zhat0) / u^2; the posterior mean of the signal part at
/// coefficient u^2 is then (1-u) zhat0.
pub fn stage1_tweedie_refine<V: VelocityField + ?Sized>(
    field: &V,
    z: &Tensor,
    cond: Option<&Tensor>,
    u: f64,
) -> Result<Tensor> {
    if u <= 0.0 {
        return Err(Error::config("refinement undefined at u = 0 (no noise left)"));
    }
    let phi = field.velocity(z, u, cond)?.reshaped(z.shape().to_vec())?;
    let mut zhat0 = z.clone();
    zhat0.axpy(u, &phi)?;
    let coeff = u * u;
    let mut refined_rows = Vec::with_capacity(z.n_rows());
    for i in 0..z.n_rows() {
        let zr = z.row(i);
        let hr = zhat0.row(i);
        let score: Vec<f64> = zr
            .iter()
            .zip(hr)
            .map(|(zv, hv)| -(zv - (1.0 - u) * hv) / coeff)
            .collect();
        refined_rows.push(crate::tweedie::tweedie_posterior_mean(zr, coeff, &score)?);
    }
    Tensor::from_rows(&refined_rows)?.reshaped(z.shape().to_vec())
}

/// Refined reverse step: posterior-mean estimate, then re-noising to the
/// next grid time with the model-implied noise. Algebraically identical to
/// [`stage1_reverse_step`]; exposed so the factorization is testable.
pub fn stage1_refined_step<V: VelocityField + ?Sized>(
    field: &V,
    z: &Tensor,
    cond: Option<&Tensor>,
    u: f64,
    dt: f64,
) -> Result<Tensor> {
    let phi = field.velocity(z, u, cond)?.reshaped(z.shape().to_vec())?;
    let mut zhat0 = z.clone();
    zhat0.axpy(u, &phi)?;
    // eps_hat = (z - (1-u) zhat0) / u ; next = (1-u') zhat0 + u' eps_hat
    let u_next = u - dt;
    let mut rows = Vec::with_capacity(z.n_rows());
    for i in 0..z.n_rows() {
        let zr = z.row(i);
        let hr = zhat0.row(i);
        let row: Vec<f64> = zr
            .iter()
            .zip(hr)
            .map(|(zv, hv)| {
                let eps_hat = (zv - (1.0 - u) * hv) / u;
                (1.0 - u_next) * hv + u_next * eps_hat
            })
            .collect();
        rows.push(row);
    }
    Tensor::from_rows(&rows)?.reshaped(z.shape().to_vec())
}

/// A trained stage net predicts (eps - Z0); its negation is the
/// data-pointing drift the reverse chain integrates.
pub struct NegatedNetField<'a>(pub &'a VelocityNet);

impl VelocityField for NegatedNetField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        let times = vec![t; x.n_rows()];
        Ok(self.0.forward_batch(x, &times, cond)?.scale(-1.0))
    }
}

/// Reconstruct clean latents from noise with a trained stage-1 net.
pub fn stage1_reconstruct(net: &VelocityNet, eps: &Tensor, cond: &Tensor, t_max: usize) -> Result<Tensor> {
    stage1_reverse_chain(&NegatedNetField(net), eps, Some(cond), t_max)
}

/// Diffusion loss: mean_i || phi(Z_t_i, cond_i, u_i) - (eps_i - Z0_i) ||^2.
pub fn stage1_diff_loss(net: &VelocityNet, batch: &StageBatch) -> Result<f64> {
    Ok(diff_loss_impl(net, batch, None)?.0)
}

pub fn stage1_diff_loss_grad(net: &VelocityNet, batch: &StageBatch) -> Result<(f64, GradientBuffer)> {
    let mut g = GradientBuffer::zeros_like(net);
    let (loss, _) = diff_loss_impl(net, batch, Some(&mut g))?;
    Ok((loss, g))
}

fn diff_loss_impl(net: &VelocityNet, batch: &StageBatch, mut grads: Option<&mut GradientBuffer>) -> Result<(f64, ())> {
    batch.validate()?;
    let n = batch.len();
    let mut loss = 0.0;
    for i in 0..n {
        let u = batch.time(i);
        let z0 = batch.z0.row(i);
        let eps = batch.eps.row(i);
        let zt: Vec<f64> = z0.iter().zip(eps).map(|(a, b)| (1.0 - u) * a + u * b).collect();
        let cond = batch.cond_row(i);
        let (out, trace) = net.forward_traced(&zt, u, Some(&cond))?;
        let resid: Vec<f64> = out
            .iter()
            .zip(eps.iter().zip(z0))
            .map(|(o, (e, z))| o - (e - z))
            .collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();
        if let Some(g) = grads.as_deref_mut() {
            let scale = 2.0 / n as f64;
            let d_out: Vec<f64> = resid.iter().map(|r| scale * r).collect();
            net.backward(&trace, &d_out, None, g)?;
        }
    }
    Ok((loss / n as f64, ()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageWeights {
    pub diff: f64,
    pub l2: f64,
    pub ssim: f64,
    pub ewc: f64,
    pub ssim_window: usize,
    /// Steps of the reconstruction chain inside the loss; decoupled from the
    /// generation-time t_max so training stays affordable.
    pub recon_steps: usize,
}

impl StageWeights {
    pub fn diff_only() -> Self {
        StageWeights { diff: 1.0, l2: 0.0, ssim: 0.0, ewc: 0.0, ssim_window: 8, recon_steps: 8 }
    }

    pub fn full(l2: f64, ssim: f64, ewc: f64) -> Self {
        StageWeights { diff: 1.0, l2, ssim, ewc, ssim_window: 8, recon_steps: 8 }
    }

    fn needs_recon(&self) -> bool {
        self.l2 != 0.0 || self.ssim != 0.0
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompositeComponents {
    pub total: f64,
    pub diff: f64,
    pub l2: f64,
    pub ssim: f64,
    pub ewc: f64,
}

/// The composite Stage-1 objective: diffusion loss, pixel reconstruction
/// loss, structural-similarity loss (as 1 - SSIM), and the EWC penalty, each
/// reported separately.
pub fn composite_stage1_loss(
    net: &VelocityNet,
    batch: &StageBatch,
    weights: &StageWeights,
    ewc: Option<&EwcState>,
) -> Result<CompositeComponents> {
    Ok(composite_impl(net, batch, weights, ewc, None)?)
}

pub fn composite_stage1_loss_grad(
    net: &VelocityNet,
    batch: &StageBatch,
    weights: &StageWeights,
    ewc: Option<&EwcState>,
) -> Result<(CompositeComponents, GradientBuffer)> {
    let mut g = GradientBuffer::zeros_like(net);
    let comps = composite_impl(net, batch, weights, ewc, Some(&mut g))?;
    Ok((comps, g))
}

fn composite_impl(
    net: &VelocityNet,
    batch: &StageBatch,
    weights: &StageWeights,
    ewc: Option<&EwcState>,
    mut grads: Option<&mut GradientBuffer>,
) -> Result<CompositeComponents> {
    batch.validate()?;
    let n = batch.len();
    let d = batch.z0.row_len();

    // Diffusion term.
    let diff = if let Some(g) = grads.as_deref_mut() {
        let (l, _) = diff_loss_impl(net, batch, Some(g))?;
        if weights.diff != 1.0 {
            // diff gradients were accumulated at weight 1; rescale is
            // handled by keeping the diffusion weight fixed at 1.
            return Err(Error::config("composite: diffusion weight is fixed at 1"));
        }
        l
    } else {
        if weights.diff != 1.0 {
            return Err(Error::config("composite: diffusion weight is fixed at 1"));
        }
        stage1_diff_loss(net, batch)?
    };

    // Reconstruction-path terms, with backprop through the reverse chain.
    let mut l2 = 0.0;
    let mut ssim_term = 0.0;
    if weights.needs_recon() {
        let t_steps = weights.recon_steps.max(1);
        let dt = 1.0 / t_steps as f64;
        let side = batch.image_side;
        for i in 0..n {
            let cond = batch.cond_row(i);
            // Forward chain, keeping traces for BPTT.
            let mut z = batch.eps.row(i).to_vec();
            let mut traces = Vec::with_capacity(t_steps);
            for k in 0..t_steps {
                let u = (t_steps - k) as f64 / t_steps as f64;
                let (phi, trace) = net.forward_traced(&z, u, Some(&cond))?;
                for (zv, pv) in z.iter_mut().zip(&phi) {
                    *zv -= dt * pv;
                }
                traces.push(trace);
            }
            let recon = Tensor::new(vec![side, side], z.clone())?;
            let target = Tensor::new(vec![side, side], batch.z0.row(i).to_vec())?;
            let pixel_se: f64 = crate::tensor::dist_sq(&z, batch.z0.row(i));
            l2 += pixel_se / d as f64;
            let (s_val, s_grad) = if weights.ssim != 0.0 {
                let (v, g) = ssim_grad(&recon, &target, weights.ssim_window)?;
                (v, Some(g))
            } else {
                (ssim(&recon, &target, weights.ssim_window)?, None)
            };
            ssim_term += 1.0 - s_val;
            if let Some(g) = grads.as_deref_mut() {
                // dL/d recon pixels.
                let mut d_z: Vec<f64> = (0..d)
                    .map(|k| weights.l2 * 2.0 * (z[k] - batch.z0.row(i)[k]) / (n * d) as f64)
                    .collect();
                if let Some(sg) = s_grad {
                    for (dz, gv) in d_z.iter_mut().zip(sg.data()) {
                        *dz += weights.ssim * (-gv) / n as f64;
                    }
                }
                // Reverse sweep through the chain.
                for trace in traces.iter().rev() {
                    let d_out: Vec<f64> = d_z.iter().map(|v| -dt * v).collect();
                    let dx = net.backward(trace, &d_out, None, g)?;
                    for (dz, add) in d_z.iter_mut().zip(&dx) {
                        *dz += add;
                    }
                }
            }
        }
        l2 /= n as f64;
        ssim_term /= n as f64;
    } else if weights.ssim != 0.0 || weights.l2 != 0.0 {
        unreachable!()
    }

    // EWC term.
    let mut ewc_val = 0.0;
    if weights.ewc != 0.0 {
        let state = ewc.ok_or_else(|| Error::config("composite: ewc weight set but no EwcState"))?;
        use crate::net::ParamVector;
        let p = net.flat_params();
        ewc_val = state.penalty(&p)?;
        if let Some(g) = grads.as_deref_mut() {
            let pg = state.penalty_grad(&p)?;
            g.add_from_flat(&pg, weights.ewc);
        }
    }

    let total = weights.diff * diff + weights.l2 * l2 + weights.ssim * ssim_term + weights.ewc * ewc_val;
    Ok(CompositeComponents { total, diff, l2, ssim: ssim_term, ewc: ewc_val })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub t_max: usize,
    pub weights: StageWeights,
}

/// Train a stage-1 net on phantom samples. Returns the per-step component
/// trace.
pub fn stage1_train(
    net: &mut VelocityNet,
    data: &[&PhantomSample],
    cfg: &Stage1Config,
    ewc: Option<&EwcState>,
) -> Result<Vec<CompositeComponents>> {
    if data.is_empty() {
        return Err(Error::config("stage1_train: empty dataset"));
    }
    let root = RngState::new(cfg.seed);
    let mut opt = OptimizerState::new(net.param_count(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut initial = f64::NAN;
    let mut over = 0usize;
    for step in 0..cfg.steps {
        let mut idx_rng = root.derive("stage1.rows", step as u64);
        let rows: Vec<&PhantomSample> = (0..cfg.batch_size).map(|_| data[idx_rng.next_index(data.len())]).collect();
        let mut batch_rng = root.derive("stage1.batch", step as u64);
        let batch = StageBatch::from_phantoms(&rows, cfg.t_max, &mut batch_rng)?;
        let (comps, grads) = composite_stage1_loss_grad(net, &batch, &cfg.weights, ewc)?;
        if step == 0 {
            initial = comps.total;
        }
        if comps.total > 1e3 * initial {
            over += 1;
            if over >= 100 {
                return Err(Error::Divergence { step, loss: comps.total, initial });
            }
        } else {
            over = 0;
        }
        opt.step_net(net, &grads)?;
        trace.push(comps);
    }
    Ok(trace)
}

/// Component trace CSV: one column per component.
pub fn write_component_trace(trace: &[CompositeComponents], seed: u64, path: &std::path::Path) -> Result<()> {
    let rows: Vec<Vec<String>> = trace
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                i.to_string(),
                crate::exports::fmt_f64(c.total),
                crate::exports::fmt_f64(c.diff),
                crate::exports::fmt_f64(c.l2),
                crate::exports::fmt_f64(c.ssim),
                crate::exports::fmt_f64(c.ewc),
                seed.to_string(),
            ]
        })
        .collect();
    crate::exports::write_csv(path, &["step", "total", "diff", "l2", "ssim", "ewc", "seed"], &rows)
}
