//! Stage 2: dual-network fine-tuning. The base network stays frozen; a
//! low-rank adapter set is the only trainable state. Alignment losses keep
//! the adapted network from drifting: activation alignment on every hidden
//! layer, spatial alignment on the one-step reverse outputs, and temporal
//! alignment on consecutive-step increments (so a constant output offset is
//! penalized spatially but not temporally).

use crate::adapt::lora::{lora_backward, lora_forward_traced, AdapterGrads, AdapterSet, LoraField};
use crate::adapt::stage1::StageBatch;
use crate::checkpoint::net_checksum;
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::net::VelocityNet;
use crate::opt::OptimizerState;
use crate::phantom::PhantomSample;
use crate::rng::RngState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Consecutive reverse-step outputs of one network: Z_{t-1} and Z_{t-2}.
#[derive(Debug, Clone)]
pub struct StepPair {
    pub next: Vec<f64>,
    pub next2: Vec<f64>,
}

/// The three alignment losses for one matched evaluation.
///
/// - activation alignment: mean over hidden layers of the squared activation
///   distance;
/// - spatial: squared distance of the one-step outputs;
/// - temporal: squared distance of the per-trajectory increments
///   (Z_{t-2} - Z_{t-1}), which a constant offset between the trajectories
///   cancels out of.
pub fn consistency_losses(
    base_hidden: &[Vec<f64>],
    adapt_hidden: &[Vec<f64>],
    base_step: &StepPair,
    adapt_step: &StepPair,
) -> Result<(f64, f64, f64)> {
    if base_hidden.len() != adapt_hidden.len() {
        return Err(Error::shape(
            format!("{} hidden layers", base_hidden.len()),
            format!("{}", adapt_hidden.len()),
            "consistency_losses",
        ));
    }
    let mut cons = 0.0;
    for (hb, ha) in base_hidden.iter().zip(adapt_hidden) {
        if hb.len() != ha.len() {
            return Err(Error::shape(
                format!("{}", hb.len()),
                format!("{}", ha.len()),
                "consistency_losses activations",
            ));
        }
        cons += hb.iter().zip(ha).map(|(b, a)| (a - b) * (a - b)).sum::<f64>();
    }
    if !base_hidden.is_empty() {
        cons /= base_hidden.len() as f64;
    }
    let spatial: f64 = base_step
        .next
        .iter()
        .zip(&adapt_step.next)
        .map(|(b, a)| (a - b) * (a - b))
        .sum();
    let temporal: f64 = (0..base_step.next.len())
        .map(|k| {
            let inc_b = base_step.next2[k] - base_step.next[k];
            let inc_a = adapt_step.next2[k] - adapt_step.next[k];
            let d = inc_a - inc_b;
            d * d
        })
        .sum();
    Ok((cons, spatial, temporal))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Weights {
    pub diff: f64,
    pub consistency: f64,
    pub temporal: f64,
    pub spatial: f64,
}

impl Stage2Weights {
    pub fn all(consistency: f64, temporal: f64, spatial: f64) -> Self {
        Stage2Weights { diff: 1.0, consistency, temporal, spatial }
    }

    pub fn diff_only() -> Self {
        Stage2Weights { diff: 1.0, consistency: 0.0, temporal: 0.0, spatial: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stage2Components {
    pub total: f64,
    pub diff: f64,
    pub consistency: f64,
    pub temporal: f64,
    pub spatial: f64,
}

/// Optional target modification for the stage-2 diffusion term: a
/// moment-matched Gaussian surrogate over the data latents whose
/// interpolation-marginal score, scaled by the stage-time coefficient u^2,
/// is subtracted from the regression target (the target-modification reading
/// of the corrected objective).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateCorrection {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl SurrogateCorrection {
    /// Score of N((1-u) mean, (1-u)^2 variance + u^2) at z.
    pub fn score(&self, z: &[f64], u: f64) -> Vec<f64> {
        let s = (1.0 - u) * (1.0 - u) * self.variance + u * u;
        z.iter()
            .zip(&self.mean)
            .map(|(zv, m)| -(zv - (1.0 - u) * m) / s.max(1e-9))
            .collect()
    }

    /// Fit to a set of flattened images.
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("surrogate correction: no data"));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        let mut var = 0.0;
        for r in rows {
            var += r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
        }
        Ok(SurrogateCorrection { mean, variance: var / (rows.len() * d) as f64 })
    }
}

/// Stage-2 composite loss and adapter gradients on one batch. The base
/// network is read-only throughout.
pub fn stage2_loss_grad(
    base: &VelocityNet,
    adapters: &AdapterSet,
    batch: &StageBatch,
    weights: &Stage2Weights,
    want_grads: bool,
) -> Result<(Stage2Components, Option<AdapterGrads>)> {
    stage2_loss_grad_corrected(base, adapters, batch, weights, None, want_grads)
}

pub fn stage2_loss_grad_corrected(
    base: &VelocityNet,
    adapters: &AdapterSet,
    batch: &StageBatch,
    weights: &Stage2Weights,
    correction: Option<&SurrogateCorrection>,
    want_grads: bool,
) -> Result<(Stage2Components, Option<AdapterGrads>)> {
    batch.validate()?;
    let n = batch.len();
    let d = batch.z0.row_len();
    let dt = batch.dt();
    let mut grads = want_grads.then(|| AdapterGrads::zeros_like(adapters));
    let (mut l_diff, mut l_cons, mut l_temp, mut l_spat) = (0.0, 0.0, 0.0, 0.0);
    let needs_second_step = weights.temporal != 0.0;
    for i in 0..n {
        let u = batch.time(i);
        let z0 = batch.z0.row(i);
        let eps = batch.eps.row(i);
        let zt: Vec<f64> = z0.iter().zip(eps).map(|(a, b)| (1.0 - u) * a + u * b).collect();
        let cond = batch.cond_row(i);

        let (phi_b, trace_b) = base.forward_traced(&zt, u, Some(&cond))?;
        let (phi_a, trace_a) = lora_forward_traced(base, adapters, &zt, u, Some(&cond))?;

        // Diffusion residual of the adapted net, with the optional
        // target-modification term u^2 * surrogate_score(z_u) subtracted
        // from the regression target.
        let corr: Option<Vec<f64>> = correction.map(|c| {
            let coeff = u * u;
            c.score(&zt, u).into_iter().map(|s| coeff * s).collect()
        });
        let resid: Vec<f64> = (0..d)
            .map(|k| {
                let mut target = eps[k] - z0[k];
                if let Some(c) = &corr {
                    target -= c[k];
                }
                phi_a[k] - target
            })
            .collect();
        l_diff += resid.iter().map(|r| r * r).sum::<f64>();

        // Activation alignment.
        let n_hidden = trace_a.n_hidden();
        let mut cons_i = 0.0;
        for l in 0..n_hidden {
            cons_i += trace_b
                .hidden(l)
                .iter()
                .zip(trace_a.hidden(l))
                .map(|(b, a)| (a - b) * (a - b))
                .sum::<f64>();
        }
        if n_hidden > 0 {
            cons_i /= n_hidden as f64;
        }
        l_cons += cons_i;

        // One-step outputs and their successors.
        let next_b: Vec<f64> = zt.iter().zip(&phi_b).map(|(z, p)| z + dt * p).collect();
        let next_a: Vec<f64> = zt.iter().zip(&phi_a).map(|(z, p)| z + dt * p).collect();
        l_spat += next_b.iter().zip(&next_a).map(|(b, a)| (a - b) * (a - b)).sum::<f64>();

        let mut temp_ctx = None;
        if needs_second_step {
            let u2 = (u - dt).max(0.0);
            let phi_b2 = base.forward(&next_b, u2, Some(&cond))?;
            let (phi_a2, trace_a2) = lora_forward_traced(base, adapters, &next_a, u2, Some(&cond))?;
            // increments: dt * phi_*2; temporal = dt^2 ||phi_a2 - phi_b2||^2
            let diff2: Vec<f64> = phi_a2.iter().zip(&phi_b2).map(|(a, b)| a - b).collect();
            l_temp += dt * dt * diff2.iter().map(|v| v * v).sum::<f64>();
            temp_ctx = Some((diff2, trace_a2));
        }

        if let Some(g) = grads.as_mut() {
            let scale = 1.0 / n as f64;
            // d total / d phi_a, aggregated across terms evaluated at (zt, u).
            let mut d_phi_a = vec![0.0; d];
            for k in 0..d {
                d_phi_a[k] += weights.diff * scale * 2.0 * resid[k];
                // spatial: d/d phi_a of dt^2 ||phi_b - phi_a||^2
                d_phi_a[k] += weights.spatial * scale * 2.0 * dt * (next_a[k] - next_b[k]);
            }
            // temporal: backprop through the second adapted evaluation.
            if let Some((diff2, trace_a2)) = &temp_ctx {
                let d_phi_a2: Vec<f64> = diff2
                    .iter()
                    .map(|v| weights.temporal * scale * 2.0 * dt * dt * v)
                    .collect();
                let d_next_a = lora_backward(base, adapters, trace_a2, &d_phi_a2, None, g)?;
                for k in 0..d {
                    d_phi_a[k] += dt * d_next_a[k];
                }
            }
            // activation alignment via hidden injection.
            let dh: Vec<Vec<f64>> = (0..n_hidden)
                .map(|l| {
                    trace_b
                        .hidden(l)
                        .iter()
                        .zip(trace_a.hidden(l))
                        .map(|(b, a)| weights.consistency * scale * 2.0 * (a - b) / n_hidden.max(1) as f64)
                        .collect()
                })
                .collect();
            lora_backward(base, adapters, &trace_a, &d_phi_a, Some(&dh), g)?;
        }
    }
    let nf = n as f64;
    let comps = Stage2Components {
        diff: l_diff / nf,
        consistency: l_cons / nf,
        temporal: l_temp / nf,
        spatial: l_spat / nf,
        total: (weights.diff * l_diff
            + weights.consistency * l_cons
            + weights.temporal * l_temp
            + weights.spatial * l_spat)
            / nf,
    };
    Ok((comps, grads))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub t_max: usize,
    pub weights: Stage2Weights,
    /// Target-modification correction for the diffusion term, if any.
    #[serde(default)]
    pub correction: Option<SurrogateCorrection>,
}

/// Fine-tune adapters against a frozen base. Verifies freeze integrity by
/// checksum; any base mutation is a hard invariant failure.
pub fn stage2_train(
    base: &VelocityNet,
    adapters: &mut AdapterSet,
    data: &[&PhantomSample],
    cfg: &Stage2Config,
) -> Result<Vec<Stage2Components>> {
    if data.is_empty() {
        return Err(Error::config("stage2_train: empty dataset"));
    }
    let base_sum = net_checksum(base);
    let root = RngState::new(cfg.seed);
    let mut opt = OptimizerState::new(adapters.trainable_count(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx_rng = root.derive("stage2.rows", step as u64);
        let rows: Vec<&PhantomSample> = (0..cfg.batch_size).map(|_| data[idx_rng.next_index(data.len())]).collect();
        let mut batch_rng = root.derive("stage2.batch", step as u64);
        let batch = StageBatch::from_phantoms(&rows, cfg.t_max, &mut batch_rng)?;
        let (comps, grads) =
            stage2_loss_grad_corrected(base, adapters, &batch, &cfg.weights, cfg.correction.as_ref(), true)?;
        let g = grads.expect("gradients requested");
        let mut flat = adapters_flat(adapters);
        opt.step_flat(&mut flat, &g.to_flat())?;
        set_adapters_flat(adapters, &flat);
        trace.push(comps);
    }
    if net_checksum(base) != base_sum {
        return Err(Error::Invariant("base parameters mutated during stage-2 training".into()));
    }
    Ok(trace)
}

pub(crate) fn adapters_flat(a: &AdapterSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.trainable_count());
    for l in &a.layers {
        out.extend_from_slice(&l.a);
        out.extend_from_slice(&l.b);
    }
    out
}

pub(crate) fn set_adapters_flat(a: &mut AdapterSet, flat: &[f64]) {
    let mut off = 0;
    for l in &mut a.layers {
        let na = l.a.len();
        l.a.copy_from_slice(&flat[off..off + na]);
        off += na;
        let nb = l.b.len();
        l.b.copy_from_slice(&flat[off..off + nb]);
        off += nb;
    }
    assert_eq!(off, flat.len());
}

/// Generate images from noise with the adapted model: reverse chain over the
/// negated adapted field.
pub fn stage2_generate(
    base: &VelocityNet,
    adapters: &AdapterSet,
    cond: &Tensor,
    eps: &Tensor,
    t_max: usize,
) -> Result<Tensor> {
    struct Neg<'a>(LoraField<'a>);
    impl VelocityField for Neg<'_> {
        fn velocity(&self, x: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor> {
            Ok(self.0.velocity(x, t, cond)?.scale(-1.0))
        }
    }
    let field = Neg(LoraField { base, adapters });
    crate::adapt::stage1::stage1_reverse_chain(&field, eps, Some(cond), t_max)
}

/// Stage-2 component trace CSV: one column per component.
pub fn write_stage2_trace(trace: &[Stage2Components], seed: u64, path: &std::path::Path) -> Result<()> {
    let rows: Vec<Vec<String>> = trace
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                i.to_string(),
                crate::exports::fmt_f64(c.total),
                crate::exports::fmt_f64(c.diff),
                crate::exports::fmt_f64(c.consistency),
                crate::exports::fmt_f64(c.temporal),
                crate::exports::fmt_f64(c.spatial),
                seed.to_string(),
            ]
        })
        .collect();
    crate::exports::write_csv(
        path,
        &["step", "total", "diff", "consistency", "temporal", "spatial", "seed"],
        &rows,
    )
}
