//! One-step and few-step distillation of a trained flow, plus exact
//! NFE/wall-clock accounting for the efficiency claims.
//!
//! The teacher's multi-step endpoints are precomputed (and optionally cached
//! on disk, keyed by teacher checksum and seed) so distillation cost is
//! decoupled from teacher sampling cost. The student shares the teacher's
//! architecture and, by default, starts from the teacher's weights: the
//! regression at t = 0 then refines the endpoint map while the field at
//! interior times stays sensible, which is what makes few-step sampling of
//! the student work.

use crate::checkpoint::net_checksum;
use crate::dist::DistributionSpec;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, PairBatch, VelocityField};
use crate::net::{GradientBuffer, VelocityNet};
use crate::opt::OptimizerState;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::tweedie::{corrected_euler_sample, Schedule, ScoreSource};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// A distilled one-step (or few-step) sampler: the same network family as
/// the teacher, with a flag selecting the posterior-mean-corrected map.
#[derive(Debug, Clone)]
pub struct StudentNet {
    pub net: VelocityNet,
    pub tweedie: bool,
}

/// Function-evaluation accounting for one sampling run. Evaluations are
/// counted by the wrapper, never estimated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NfeReport {
    pub sampler: String,
    pub steps_per_sample: usize,
    pub samples: usize,
    pub evaluations: u64,
    pub wall_clock_secs: f64,
    pub samples_per_sec: f64,
}

impl NfeReport {
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        crate::exports::append_jsonl(path, self)
    }

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.sampler.clone(),
            self.steps_per_sample.to_string(),
            self.samples.to_string(),
            self.evaluations.to_string(),
            crate::exports::fmt_f64(self.wall_clock_secs),
            crate::exports::fmt_f64(self.samples_per_sec),
        ]
    }

    pub const CSV_HEADER: [&'static str; 6] =
        ["sampler", "steps_per_sample", "samples", "evaluations", "wall_clock_secs", "samples_per_sec"];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Step count used to generate teacher endpoints.
    pub teacher_steps: usize,
    /// Number of teacher pairs to generate.
    pub pair_count: usize,
    /// Start the student from the teacher's weights.
    pub init_from_teacher: bool,
    /// Optional on-disk pair cache directory.
    pub cache_dir: Option<PathBuf>,
    /// Weight of the interior-time anchor: flow matching on the teacher
    /// coupling at t ~ U[0,1). The endpoint regression alone only constrains
    /// t = 0 and erodes the field at the interior times a k-step sampler
    /// visits; anchoring on the (already straightened) teacher coupling
    /// keeps Euler over the student field meaningful for k > 1.
    pub interior_weight: f64,
}

impl DistillConfig {
    pub fn new(steps: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        DistillConfig {
            steps,
            batch_size,
            learning_rate,
            seed,
            teacher_steps: 50,
            pair_count: 4096,
            init_from_teacher: true,
            cache_dir: None,
            interior_weight: 1.0,
        }
    }
}

/// Endpoint-map regression: mean || (x1 - x0) - v(x0, 0) ||^2, with the
/// regression target shifted by (1 - alpha_bar_0) score(x0, 0) when the
/// student is flagged for the corrected map.
pub fn distill_loss(
    student: &StudentNet,
    batch: &PairBatch,
    correction: Option<(&Schedule, &ScoreSource)>,
) -> Result<f64> {
    Ok(distill_loss_impl(student, batch, correction, false)?.0)
}

pub fn distill_loss_grad(
    student: &StudentNet,
    batch: &PairBatch,
    correction: Option<(&Schedule, &ScoreSource)>,
) -> Result<(f64, GradientBuffer)> {
    let (l, g) = distill_loss_impl(student, batch, correction, true)?;
    Ok((l, g.expect("gradients requested")))
}

fn distill_loss_impl(
    student: &StudentNet,
    batch: &PairBatch,
    correction: Option<(&Schedule, &ScoreSource)>,
    want_grads: bool,
) -> Result<(f64, Option<GradientBuffer>)> {
    let n = batch.len();
    let mut grads = want_grads.then(|| GradientBuffer::zeros_like(&student.net));
    let mut loss = 0.0;
    let coeff_ctx = if student.tweedie {
        let (schedule, source) =
            correction.ok_or_else(|| Error::config("corrected student needs schedule and score source"))?;
        Some((schedule.coefficient(0.0)?, source))
    } else {
        None
    };
    for i in 0..n {
        let x0 = batch.x0.row(i);
        let x1 = batch.x1.row(i);
        let cond = batch.cond.as_ref().map(|c| c.row(i));
        let (v, trace) = student.net.forward_traced(x0, 0.0, cond)?;
        let mut residual = Vec::with_capacity(v.len());
        match &coeff_ctx {
            Some((coeff, source)) if *coeff != 0.0 => {
                let s = source.score(x0, 0.0)?;
                for k in 0..v.len() {
                    residual.push(v[k] - ((x1[k] - x0[k]) - coeff * s[k]));
                }
            }
            _ => {
                for k in 0..v.len() {
                    residual.push(v[k] - (x1[k] - x0[k]));
                }
            }
        }
        loss += residual.iter().map(|r| r * r).sum::<f64>();
        if let Some(g) = grads.as_mut() {
            let scale = 2.0 / n as f64;
            let d_out: Vec<f64> = residual.iter().map(|r| scale * r).collect();
            student.net.backward(&trace, &d_out, None, g)?;
        }
    }
    Ok((loss / n as f64, grads))
}

const CACHE_MAGIC: &[u8; 8] = b"PAIRCCH1";

/// Pair-cache file: header (teacher checksum, seed, count, dims) followed by
/// packed little-endian f64 pairs (x0 row then x1 row, per pair).
pub fn save_pair_cache(path: &Path, teacher_checksum: u64, seed: u64, pairs: &PairBatch) -> Result<()> {
    let (n, d) = (pairs.len(), pairs.dim());
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(CACHE_MAGIC)?;
        f.write_all(&teacher_checksum.to_le_bytes())?;
        f.write_all(&seed.to_le_bytes())?;
        f.write_all(&(n as u32).to_le_bytes())?;
        f.write_all(&(d as u32).to_le_bytes())?;
        for i in 0..n {
            f.write_all(&crate::checkpoint::f64s_to_le_bytes(pairs.x0.row(i)))?;
            f.write_all(&crate::checkpoint::f64s_to_le_bytes(pairs.x1.row(i)))?;
        }
    }
    // Single-writer discipline: publish atomically.
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_pair_cache(path: &Path, expect_checksum: u64, expect_seed: u64) -> Result<PairBatch> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 32 || &buf[..8] != CACHE_MAGIC {
        return Err(Error::config(format!("{}: not a pair cache", path.display())));
    }
    let checksum = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
    let seed = u64::from_le_bytes(buf[16..24].try_into().expect("8 bytes"));
    if checksum != expect_checksum || seed != expect_seed {
        return Err(Error::config("pair cache key mismatch (teacher checksum or seed)"));
    }
    let n = u32::from_le_bytes(buf[24..28].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(buf[28..32].try_into().expect("4 bytes")) as usize;
    let vals = crate::checkpoint::le_bytes_to_f64s(&buf[32..])?;
    if vals.len() != 2 * n * d {
        return Err(Error::config("truncated pair cache"));
    }
    let mut x0 = Vec::with_capacity(n * d);
    let mut x1 = Vec::with_capacity(n * d);
    for i in 0..n {
        x0.extend_from_slice(&vals[2 * i * d..(2 * i + 1) * d]);
        x1.extend_from_slice(&vals[(2 * i + 1) * d..(2 * i + 2) * d]);
    }
    PairBatch::new(Tensor::new(vec![n, d], x0)?, Tensor::new(vec![n, d], x1)?, None)
}

/// Teacher coupling (x0, teacher-sampled x1) at a fixed high step count,
/// optionally via the on-disk cache.
pub fn teacher_pairs(
    teacher: &VelocityNet,
    prior: &DistributionSpec,
    cfg: &DistillConfig,
) -> Result<PairBatch> {
    let checksum = net_checksum(teacher);
    let cache_path = cfg.cache_dir.as_ref().map(|dir| {
        dir.join(format!(
            "pairs_{checksum:016x}_{}_{}_{}.bin",
            cfg.seed, cfg.pair_count, cfg.teacher_steps
        ))
    });
    if let Some(p) = &cache_path {
        if p.exists() {
            return load_pair_cache(p, checksum, cfg.seed);
        }
    }
    let mut rng = RngState::new(cfg.seed).derive("distill.pairs", 0);
    let x0 = prior.sample(cfg.pair_count, &mut rng)?;
    let (x1, _) = euler_sample(teacher, &x0, cfg.teacher_steps, None)?;
    let pairs = PairBatch::new(x0, x1, None)?;
    if let Some(p) = &cache_path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_pair_cache(p, checksum, cfg.seed, &pairs)?;
    }
    Ok(pairs)
}

/// Train a student on a fixed pair set (minibatched without replacement per
/// epoch ordering derived from the seed).
pub fn train_student(
    student: &mut StudentNet,
    pairs: &PairBatch,
    cfg: &DistillConfig,
    correction: Option<(&Schedule, &ScoreSource)>,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::config("train_student: empty pair set"));
    }
    let root = RngState::new(cfg.seed);
    let mut opt = OptimizerState::new(student.net.param_count(), cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx_rng = root.derive("distill.rows", step as u64);
        let rows: Vec<usize> = (0..cfg.batch_size).map(|_| idx_rng.next_index(pairs.len())).collect();
        let x0 = Tensor::from_rows(&rows.iter().map(|&r| pairs.x0.row(r).to_vec()).collect::<Vec<_>>())?;
        let x1 = Tensor::from_rows(&rows.iter().map(|&r| pairs.x1.row(r).to_vec()).collect::<Vec<_>>())?;
        let mini = PairBatch::new(x0, x1, None)?;
        let (loss, mut grads) = distill_loss_grad(student, &mini, correction)?;
        if cfg.interior_weight != 0.0 {
            let mut t_rng = root.derive("distill.t", step as u64);
            let times: Vec<f64> = (0..cfg.batch_size).map(|_| t_rng.uniform_in(0.0, 1.0)).collect();
            let (_, mut g_int) = crate::flow::rf_loss_grad(&student.net, &mini, &times)?;
            g_int.scale(cfg.interior_weight);
            grads.add_assign(&g_int);
        }
        opt.step_net(&mut student.net, &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Full distillation: generate (or load) teacher endpoints, then regress the
/// one-step map. The teacher is never mutated.
pub fn distill(
    teacher: &VelocityNet,
    prior: &DistributionSpec,
    cfg: &DistillConfig,
    tweedie: Option<(&Schedule, &ScoreSource)>,
) -> Result<(StudentNet, Vec<f64>)> {
    let teacher_sum = net_checksum(teacher);
    let pairs = teacher_pairs(teacher, prior, cfg)?;
    let net = if cfg.init_from_teacher {
        teacher.clone()
    } else {
        VelocityNet::init(teacher.config().clone(), &mut RngState::new(cfg.seed).derive("distill.init", 0))?
    };
    let mut student = StudentNet { net, tweedie: tweedie.is_some() };
    let losses = train_student(&mut student, &pairs, cfg, tweedie)?;
    if net_checksum(teacher) != teacher_sum {
        return Err(Error::Invariant("teacher parameters mutated during distillation".into()));
    }
    Ok((student, losses))
}

/// Uniform k-step Euler over the student field, with per-step posterior-mean
/// drift when the student is flagged. Returns samples plus the populated
/// report.
pub fn k_step_sample(
    student: &StudentNet,
    x0: &Tensor,
    k: usize,
    correction: Option<(&Schedule, &ScoreSource)>,
    sampler_name: &str,
) -> Result<(Tensor, NfeReport)> {
    if k == 0 {
        return Err(Error::config("k_step_sample: k must be >= 1"));
    }
    let start = Instant::now();
    let (samples, nfe) = if student.tweedie {
        let (schedule, source) =
            correction.ok_or_else(|| Error::config("corrected student needs schedule and score source"))?;
        corrected_euler_sample(&student.net, x0, k, schedule, source, None)?
    } else {
        euler_sample(&student.net, x0, k, None)?
    };
    let wall = start.elapsed().as_secs_f64();
    let n = x0.n_rows();
    Ok((
        samples,
        NfeReport {
            sampler: sampler_name.to_string(),
            steps_per_sample: k,
            samples: n,
            evaluations: nfe,
            wall_clock_secs: wall,
            samples_per_sec: n as f64 / wall.max(1e-12),
        },
    ))
}
