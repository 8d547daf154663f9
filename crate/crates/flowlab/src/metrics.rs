//! Two-sample distribution metrics, image similarity, and the
//! distribution-alignment export.
//!
//! These are the desk-scale replacements for feature-extractor-based
//! distances: an unbiased multi-bandwidth RBF MMD, a sliced 2-Wasserstein
//! distance calibrated so translations report their true length, a Frechet
//! distance in a fixed random-feature space, and a uniform-window SSIM.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{dist_sq, dot, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_x: usize,
    pub n_y: usize,
    /// Bandwidths, projection counts, seeds: whatever fixes the estimator.
    pub params: serde_json::Value,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

impl MetricReport {
    pub fn append_jsonl(&self, path: &std::path::Path) -> Result<()> {
        crate::exports::append_jsonl(path, self)
    }
}

/// Median-heuristic bandwidth set: median pairwise distance over the pooled
/// sample, scaled by {0.5, 1, 2}.
pub fn median_heuristic_bandwidths(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let mut pooled: Vec<&[f64]> = Vec::with_capacity(x.n_rows() + y.n_rows());
    for i in 0..x.n_rows() {
        pooled.push(x.row(i));
    }
    for i in 0..y.n_rows() {
        pooled.push(y.row(i));
    }
    // Subsample pairs for large inputs; exact for small ones.
    let n = pooled.len();
    let mut dists = Vec::new();
    if n * (n - 1) / 2 <= 200_000 {
        for i in 0..n {
            for j in (i + 1)..n {
                dists.push(dist_sq(pooled[i], pooled[j]).sqrt());
            }
        }
    } else {
        let mut rng = RngState::new(0x9eb1);
        for _ in 0..200_000 {
            let i = rng.next_index(n);
            let j = rng.next_index(n);
            if i != j {
                dists.push(dist_sq(pooled[i], pooled[j]).sqrt());
            }
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let med = dists[dists.len() / 2].max(1e-12);
    Ok(vec![0.5 * med, med, 2.0 * med])
}

fn rbf_sum(a: &[f64], b: &[f64], bandwidths: &[f64]) -> f64 {
    let d2 = dist_sq(a, b);
    bandwidths.iter().map(|h| (-d2 / (2.0 * h * h)).exp()).sum()
}

/// Unbiased squared MMD with a sum of RBF kernels.
///
/// For equal sample sizes this is the complete paired U-statistic
/// (diagonal excluded in all four sums), which is exactly zero when X = Y;
/// for unequal sizes the standard unbiased estimator is used.
pub fn mmd2(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    let (n, m) = (x.n_rows(), y.n_rows());
    if n < 2 || m < 2 {
        return Err(Error::config("mmd2 needs at least 2 samples per side"));
    }
    if x.row_len() != y.row_len() {
        return Err(Error::shape(format!("{}", x.row_len()), format!("{}", y.row_len()), "mmd2"));
    }
    if bandwidths.is_empty() {
        return Err(Error::config("mmd2: empty bandwidth set"));
    }
    if n == m {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                acc += rbf_sum(x.row(i), x.row(j), bandwidths)
                    + rbf_sum(y.row(i), y.row(j), bandwidths)
                    - rbf_sum(x.row(i), y.row(j), bandwidths)
                    - rbf_sum(x.row(j), y.row(i), bandwidths);
            }
        }
        Ok(acc / (n * (n - 1)) as f64)
    } else {
        let mut xx = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += rbf_sum(x.row(i), x.row(j), bandwidths);
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += rbf_sum(y.row(i), y.row(j), bandwidths);
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..m {
                xy += rbf_sum(x.row(i), y.row(j), bandwidths);
            }
        }
        Ok(xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64)
    }
}

/// Convenience: median-heuristic MMD with the report populated.
pub fn mmd2_report(x: &Tensor, y: &Tensor, seed: u64) -> Result<(f64, MetricReport)> {
    let start = Instant::now();
    let bw = median_heuristic_bandwidths(x, y)?;
    let v = mmd2(x, y, &bw)?;
    let report = MetricReport {
        metric: "mmd2".into(),
        value: v,
        n_x: x.n_rows(),
        n_y: y.n_rows(),
        params: serde_json::json!({ "bandwidths": bw }),
        seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((v, report))
}

/// Exact squared 2-Wasserstein distance between two 1-D empirical
/// distributions: piecewise integral of the squared quantile difference over
/// the merged probability grid. Reduces to the sorted-coupling mean for
/// equal sizes.
fn w2_sq_1d(mut xs: Vec<f64>, mut ys: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    ys.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let (n, m) = (xs.len(), ys.len());
    let mut acc = 0.0;
    let mut q = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < n && j < m {
        let qi = (i + 1) as f64 / n as f64;
        let qj = (j + 1) as f64 / m as f64;
        let q_next = qi.min(qj);
        let d = xs[i] - ys[j];
        acc += d * d * (q_next - q);
        q = q_next;
        if qi <= q_next + 1e-18 {
            i += 1;
        }
        if qj <= q_next + 1e-18 {
            j += 1;
        }
    }
    acc
}

/// E|u_1| for u uniform on the unit sphere in R^d, by the Gamma-function
/// recurrence c_d = c_{d-2} (d-2) / (d-1) with c_1 = 1, c_2 = 2/pi.
fn mean_abs_projection(d: usize) -> f64 {
    assert!(d >= 1);
    let mut c = if d % 2 == 1 { 1.0 } else { 2.0 / std::f64::consts::PI };
    let mut k = if d % 2 == 1 { 1 } else { 2 };
    while k < d {
        k += 2;
        c *= (k - 2) as f64 / (k - 1) as f64;
    }
    c
}

/// Sliced 2-Wasserstein distance: mean over random unit directions of the
/// 1-D W2 distance, rescaled by 1 / E|<u, e>| so that a pure translation by
/// c reports |c| in the many-projection limit.
pub fn sliced_wasserstein(x: &Tensor, y: &Tensor, n_projections: usize, rng: &mut RngState) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::config("sliced_wasserstein: empty input"));
    }
    let d = x.row_len();
    if d != y.row_len() {
        return Err(Error::shape(format!("{d}"), format!("{}", y.row_len()), "sliced_wasserstein"));
    }
    if n_projections == 0 {
        return Err(Error::config("sliced_wasserstein: need at least one projection"));
    }
    let mut acc = 0.0;
    for _ in 0..n_projections {
        let mut u: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        u.iter_mut().for_each(|v| *v /= norm);
        let px: Vec<f64> = (0..x.n_rows()).map(|i| dot(x.row(i), &u)).collect();
        let py: Vec<f64> = (0..y.n_rows()).map(|i| dot(y.row(i), &u)).collect();
        acc += w2_sq_1d(px, py).sqrt();
    }
    Ok(acc / n_projections as f64 / mean_abs_projection(d))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Adequate for the
/// 16x16 feature covariances used here.
pub(crate) fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let off = |m: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i][j] * m[i][j];
                }
            }
        }
        s
    };
    let scale: f64 = (0..n).map(|i| m[i][i].abs()).fold(1e-300, f64::max);
    for _sweep in 0..100 {
        if off(&m) <= 1e-28 * scale * scale * (n * n) as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    // Columns of v are eigenvectors; return as rows for convenience.
    let mut vecs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            vecs[j][i] = v[i][j];
        }
    }
    (eigvals, vecs)
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let k = b.len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i][p];
            for j in 0..m {
                out[i][j] += aip * b[p][j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// clamped to 0.
fn sqrtm_psd(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let (vals, vecs_rows) = symmetric_eigen(a);
    // vecs_rows[r] is the r-th eigenvector.
    let mut out = vec![vec![0.0; n]; n];
    for (lam, vec_r) in vals.iter().zip(&vecs_rows) {
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i][j] += s * vec_r[i] * vec_r[j];
            }
        }
    }
    out
}

/// Frechet distance between Gaussians:
/// ||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2}).
pub fn frechet_gaussian(mu1: &[f64], c1: &[Vec<f64>], mu2: &[f64], c2: &[Vec<f64>]) -> f64 {
    let n = mu1.len();
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let s2 = sqrtm_psd(c2);
    let inner = mat_mul(&mat_mul(&s2, c1), &s2);
    let (vals, _) = symmetric_eigen(&inner);
    let tr_sqrt: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let tr: f64 = (0..n).map(|i| c1[i][i] + c2[i][i]).sum();
    mean_term + tr - 2.0 * tr_sqrt
}

pub const TOY_FID_FEATURES: usize = 16;

/// The fixed random-feature map behind toy_fid: half-rectified affine
/// features, dimensions pinned by `feature_seed`.
pub struct FeatureMap {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl FeatureMap {
    pub fn new(input_dim: usize, feature_seed: u64) -> Self {
        let mut rng = RngState::new(feature_seed).derive("toy_fid.features", 0);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let w = (0..TOY_FID_FEATURES)
            .map(|_| (0..input_dim).map(|_| scale * rng.next_normal()).collect())
            .collect();
        let b = (0..TOY_FID_FEATURES).map(|_| 0.5 * rng.next_normal()).collect();
        FeatureMap { w, b }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| (dot(row, x) + b).max(0.0))
            .collect()
    }
}

fn moments(features: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = features.len();
    let d = features[0].len();
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = vec![vec![0.0; d]; d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in 0..d {
                c[i][j] += di * (f[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for row in &mut c {
        row.iter_mut().for_each(|v| *v /= denom);
    }
    (mu, c)
}

/// Frechet distance in the fixed 16-dim random-feature space.
pub fn toy_fid(x: &Tensor, y: &Tensor, feature_seed: u64) -> Result<f64> {
    if x.n_rows() <= TOY_FID_FEATURES || y.n_rows() <= TOY_FID_FEATURES {
        return Err(Error::config(format!(
            "toy_fid needs more than {TOY_FID_FEATURES} samples per side"
        )));
    }
    if x.row_len() != y.row_len() {
        return Err(Error::shape(format!("{}", x.row_len()), format!("{}", y.row_len()), "toy_fid"));
    }
    let map = FeatureMap::new(x.row_len(), feature_seed);
    let fx: Vec<Vec<f64>> = (0..x.n_rows()).map(|i| map.apply(x.row(i))).collect();
    let fy: Vec<Vec<f64>> = (0..y.n_rows()).map(|i| map.apply(y.row(i))).collect();
    let (mx, cx) = moments(&fx);
    let (my, cy) = moments(&fy);
    let v = frechet_gaussian(&mx, &cx, &my, &cy);
    if !v.is_finite() {
        return Err(Error::numeric(format!("toy_fid produced {v}")));
    }
    Ok(v)
}

/// Mean local SSIM with a uniform window; images in [0,1].
pub fn ssim(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    Ok(ssim_impl(a, b, window, false)?.0)
}

/// SSIM plus its gradient with respect to every pixel of `a`.
pub fn ssim_grad(a: &Tensor, b: &Tensor, window: usize) -> Result<(f64, Tensor)> {
    let (v, g) = ssim_impl(a, b, window, true)?;
    Ok((v, g.expect("gradient requested")))
}

const SSIM_C1: f64 = 1e-4; // (0.01)^2 on the [0,1] range
const SSIM_C2: f64 = 9e-4; // (0.03)^2

fn ssim_impl(a: &Tensor, b: &Tensor, window: usize, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape()), "ssim"));
    }
    if a.shape().len() != 2 {
        return Err(Error::config("ssim expects 2-D images"));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if window == 0 || window > h || window > w {
        return Err(Error::config(format!("window {window} does not fit {h}x{w}")));
    }
    let npix = (window * window) as f64;
    let n_wins = ((h - window + 1) * (w - window + 1)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; h * w]);
    for wi in 0..=(h - window) {
        for wj in 0..=(w - window) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..window {
                for dj in 0..window {
                    let av = a.data()[(wi + di) * w + (wj + dj)];
                    let bv = b.data()[(wi + di) * w + (wj + dj)];
                    sa += av;
                    sb += bv;
                    saa += av * av;
                    sbb += bv * bv;
                    sab += av * bv;
                }
            }
            let (mu_a, mu_b) = (sa / npix, sb / npix);
            let var_a = saa / npix - mu_a * mu_a;
            let var_b = sbb / npix - mu_b * mu_b;
            let cov = sab / npix - mu_a * mu_b;
            let a_term = 2.0 * mu_a * mu_b + SSIM_C1;
            let b_term = 2.0 * cov + SSIM_C2;
            let c_term = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
            let d_term = var_a + var_b + SSIM_C2;
            let s = (a_term * b_term) / (c_term * d_term);
            total += s;
            if let Some(g) = grad.as_mut() {
                // d s / d a_p for each pixel p in the window:
                // dA = 2 mu_b / N, dB = 2 (b_p - mu_b) / N,
                // dC = 2 mu_a / N, dD = 2 (a_p - mu_a) / N.
                let cd = c_term * d_term;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = (wi + di) * w + (wj + dj);
                        let ap = a.data()[idx];
                        let bp = b.data()[idx];
                        let d_a_term = 2.0 * mu_b / npix;
                        let d_b_term = 2.0 * (bp - mu_b) / npix;
                        let d_c_term = 2.0 * mu_a / npix;
                        let d_d_term = 2.0 * (ap - mu_a) / npix;
                        let num = (d_a_term * b_term + a_term * d_b_term) * cd
                            - a_term * b_term * (d_c_term * d_term + c_term * d_d_term);
                        g[idx] += num / (cd * cd) / n_wins;
                    }
                }
            }
        }
    }
    let value = total / n_wins;
    let grad = match grad {
        Some(g) => Some(Tensor::new(vec![h, w], g)?),
        None => None,
    };
    Ok((value, grad))
}

/// One row of the distribution-alignment table: a 1-D marginal histogram
/// value for one sampler (or the reference), plus per-sampler MMD summary
/// rows.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentTable {
    pub bins: usize,
    /// (sampler, dim, bin_center, density)
    pub marginals: Vec<(String, usize, f64, f64)>,
    /// (sampler, mmd2 vs target)
    pub summary: Vec<(String, f64)>,
}

impl AlignmentTable {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut rows: Vec<Vec<String>> = self
            .marginals
            .iter()
            .map(|(s, d, c, v)| {
                vec![
                    s.clone(),
                    d.to_string(),
                    crate::exports::fmt_f64(*c),
                    crate::exports::fmt_f64(*v),
                    String::new(),
                ]
            })
            .collect();
        for (s, m) in &self.summary {
            rows.push(vec![s.clone(), String::new(), String::new(), String::new(), crate::exports::fmt_f64(*m)]);
        }
        crate::exports::write_csv(path, &["sampler", "dim", "bin_center", "density", "mmd2"], &rows)
    }
}

/// Histogram each sampler's 1-D marginals against the reference samples on a
/// common range, and attach an MMD summary per sampler.
pub fn alignment_export(
    named_samples: &[(String, Tensor)],
    target: &Tensor,
    bins: usize,
) -> Result<AlignmentTable> {
    if named_samples.is_empty() {
        return Err(Error::config("alignment_export: need at least one sampler"));
    }
    if bins < 2 {
        return Err(Error::config("alignment_export: need at least 2 bins"));
    }
    let d = target.row_len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut scan = |t: &Tensor| {
        for i in 0..t.n_rows() {
            for (k, v) in t.row(i).iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
    };
    scan(target);
    for (_, s) in named_samples {
        if s.row_len() != d {
            return Err(Error::shape(format!("{d}"), format!("{}", s.row_len()), "alignment_export"));
        }
        scan(s);
    }
    let histogram = |t: &Tensor, dim: usize| -> Vec<f64> {
        let (l, h) = (lo[dim], hi[dim]);
        let width = ((h - l) / bins as f64).max(1e-300);
        let mut counts = vec![0.0; bins];
        for i in 0..t.n_rows() {
            let v = t.row(i)[dim];
            let b = (((v - l) / width) as usize).min(bins - 1);
            counts[b] += 1.0;
        }
        let norm = t.n_rows() as f64 * width;
        counts.iter().map(|c| c / norm).collect()
    };
    let mut marginals = Vec::new();
    let mut summary = Vec::new();
    for dim in 0..d {
        let width = ((hi[dim] - lo[dim]) / bins as f64).max(1e-300);
        let centers: Vec<f64> = (0..bins).map(|b| lo[dim] + (b as f64 + 0.5) * width).collect();
        let t_hist = histogram(target, dim);
        for (b, (&c, &v)) in centers.iter().zip(&t_hist).enumerate() {
            let _ = b;
            marginals.push(("target".to_string(), dim, c, v));
        }
        for (name, s) in named_samples {
            let s_hist = histogram(s, dim);
            for (&c, &v) in centers.iter().zip(&s_hist) {
                marginals.push((name.clone(), dim, c, v));
            }
        }
    }
    for (name, s) in named_samples {
        let bw = median_heuristic_bandwidths(s, target)?;
        summary.push((name.clone(), mmd2(s, target, &bw)?));
    }
    Ok(AlignmentTable { bins, marginals, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DistributionSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn mmd_identical_inputs_exactly_zero() {
        let mut rng = RngState::new(3);
        let x = DistributionSpec::std_normal(2).sample(20, &mut rng).unwrap();
        let v = mmd2(&x, &x.clone(), &[1.0]).unwrap();
        assert!(v.abs() <= 1e-12, "mmd {v}");
    }

    /// Brute-force double-sum oracle on 3-point sets, single bandwidth 1.
    #[test]
    fn mmd_three_point_brute_force() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.5]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.5], vec![-1.0], vec![2.0]]).unwrap();
        let k = |a: f64, b: f64| (-(a - b) * (a - b) / 2.0).exp();
        // Independent evaluation of the paired U-statistic.
        let xs = [0.0, 1.0, 2.5];
        let ys = [0.5, -1.0, 2.0];
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                acc += k(xs[i], xs[j]) + k(ys[i], ys[j]) - k(xs[i], ys[j]) - k(xs[j], ys[i]);
            }
        }
        let want = acc / 6.0;
        let got = mmd2(&x, &y, &[1.0]).unwrap();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn mmd_separates_shifted_gaussians() {
        let mut rng = RngState::new(10);
        let x = DistributionSpec::std_normal(1).sample(1000, &mut rng).unwrap();
        let y = DistributionSpec::IsotropicGaussian { mean: vec![5.0], variance: 1.0 }
            .sample(1000, &mut rng)
            .unwrap();
        let v = mmd2(&x, &y, &[1.0]).unwrap();
        assert!(v > 0.5, "mmd {v}");
    }

    #[test]
    fn mmd_unequal_sizes_unbiased_form() {
        let mut rng = RngState::new(11);
        let spec = DistributionSpec::std_normal(1);
        let x = spec.sample(50, &mut rng).unwrap();
        let y = spec.sample(80, &mut rng).unwrap();
        let v = mmd2(&x, &y, &[1.0]).unwrap();
        assert!(v.abs() < 0.05, "same-distribution mmd {v}");
    }

    #[test]
    fn sw_identical_is_zero() {
        let mut rng = RngState::new(4);
        let x = DistributionSpec::std_normal(3).sample(40, &mut rng).unwrap();
        let v = sliced_wasserstein(&x, &x.clone(), 32, &mut RngState::new(9)).unwrap();
        assert!(v.abs() <= 1e-12, "sw {v}");
    }

    /// 1-D: the sliced distance equals the sorted-coupling RMS difference,
    /// which in turn must match brute-force optimal assignment for n <= 6.
    #[test]
    fn sw_one_dim_matches_assignment_oracle() {
        let xs = vec![0.3, -1.2, 2.0, 0.9, -0.5];
        let ys = vec![1.1, 0.0, -2.0, 0.4, 2.2];
        let x = Tensor::from_rows(&xs.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap();
        let y = Tensor::from_rows(&ys.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap();
        let got = sliced_wasserstein(&x, &y, 4, &mut RngState::new(2)).unwrap();

        // Brute-force optimal assignment over all permutations.
        fn permutations(v: Vec<usize>) -> Vec<Vec<usize>> {
            if v.len() <= 1 {
                return vec![v];
            }
            let mut out = Vec::new();
            for i in 0..v.len() {
                let mut rest = v.clone();
                let x = rest.remove(i);
                for mut p in permutations(rest) {
                    p.insert(0, x);
                    out.push(p);
                }
            }
            out
        }
        let mut best = f64::INFINITY;
        for p in permutations((0..5).collect()) {
            let cost: f64 = p.iter().enumerate().map(|(i, &j)| (xs[i] - ys[j]) * (xs[i] - ys[j])).sum();
            best = best.min(cost / 5.0);
        }
        let oracle = best.sqrt();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
    }

    #[test]
    fn sw_translation_calibrated() {
        // Translation by c: the calibrated distance approaches |c|.
        let mut rng = RngState::new(5);
        let x = DistributionSpec::std_normal(2).sample(400, &mut rng).unwrap();
        let c = [1.2, -0.9];
        let shifted: Vec<Vec<f64>> = (0..400)
            .map(|i| x.row(i).iter().zip(&c).map(|(v, d)| v + d).collect())
            .collect();
        let y = Tensor::from_rows(&shifted).unwrap();
        let v = sliced_wasserstein(&x, &y, 256, &mut RngState::new(6)).unwrap();
        let c_norm = (c[0] * c[0] + c[1] * c[1]).sqrt();
        assert!(
            (v - c_norm).abs() <= 0.05 * c_norm,
            "sw {v} vs |c| {c_norm}"
        );
    }

    #[test]
    fn jacobi_eigen_reconstructs() {
        let a = vec![
            vec![4.0, 1.0, 0.5, 0.0],
            vec![1.0, 3.0, 0.2, 0.1],
            vec![0.5, 0.2, 2.0, 0.3],
            vec![0.0, 0.1, 0.3, 1.0],
        ];
        let (vals, vecs) = symmetric_eigen(&a);
        // A v = lambda v for every pair.
        for (lam, v) in vals.iter().zip(&vecs) {
            for i in 0..4 {
                let av: f64 = (0..4).map(|j| a[i][j] * v[j]).sum();
                assert_abs_diff_eq!(av, lam * v[i], epsilon = 1e-9);
            }
        }
        let tr: f64 = vals.iter().sum();
        assert_abs_diff_eq!(tr, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn frechet_closed_form_diagnostic() {
        // Equal means, C1 = I, C2 = 4I in a 16-dim feature space:
        // Tr(I + 4I - 2 * 2I) = 16.
        let n = TOY_FID_FEATURES;
        let mu = vec![0.0; n];
        let mut c1 = vec![vec![0.0; n]; n];
        let mut c2 = vec![vec![0.0; n]; n];
        for i in 0..n {
            c1[i][i] = 1.0;
            c2[i][i] = 4.0;
        }
        let v = frechet_gaussian(&mu, &c1, &mu, &c2);
        assert_abs_diff_eq!(v, 16.0, epsilon = 1e-9);
    }

    #[test]
    fn toy_fid_self_distance_zero_and_noise_floor() {
        let mut rng = RngState::new(12);
        let spec = DistributionSpec::std_normal(2);
        let x = spec.sample(5000, &mut rng).unwrap();
        let v = toy_fid(&x, &x.clone(), 7).unwrap();
        assert!(v.abs() <= 1e-8, "self toy_fid {v}");
        let y = spec.sample(5000, &mut rng).unwrap();
        let f = toy_fid(&x, &y, 7).unwrap();
        assert!(f >= 0.0 && f <= 0.05, "same-distribution toy_fid {f}");
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = Tensor::new(vec![16, 16], (0..256).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        assert_eq!(ssim(&a, &a, 8).unwrap(), 1.0);
        let zeros = Tensor::zeros(vec![16, 16]);
        let ones = Tensor::filled(vec![16, 16], 1.0);
        let v = ssim(&zeros, &ones, 8).unwrap();
        assert!(v < 0.01, "constant-images ssim {v}");
        // Symmetry.
        let b = Tensor::new(vec![16, 16], (0..256).map(|i| ((i * 13) % 11) as f64 / 11.0).collect()).unwrap();
        assert_abs_diff_eq!(ssim(&a, &b, 8).unwrap(), ssim(&b, &a, 8).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn ssim_range() {
        let mut rng = RngState::new(77);
        for _ in 0..5 {
            let a = Tensor::new(vec![12, 12], (0..144).map(|_| rng.next_uniform()).collect()).unwrap();
            let b = Tensor::new(vec![12, 12], (0..144).map(|_| rng.next_uniform()).collect()).unwrap();
            let v = ssim(&a, &b, 6).unwrap();
            assert!((-1.0..=1.0).contains(&v), "ssim {v}");
        }
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = RngState::new(9);
        let a = Tensor::new(vec![8, 8], (0..64).map(|_| rng.next_uniform()).collect()).unwrap();
        let b = Tensor::new(vec![8, 8], (0..64).map(|_| rng.next_uniform()).collect()).unwrap();
        let (_, g) = ssim_grad(&a, &b, 4).unwrap();
        let h = 1e-6;
        for idx in [0usize, 13, 37, 63] {
            let mut ap = a.clone();
            ap.data_mut()[idx] += h;
            let mut am = a.clone();
            am.data_mut()[idx] -= h;
            let fd = (ssim(&ap, &b, 4).unwrap() - ssim(&am, &b, 4).unwrap()) / (2.0 * h);
            assert!(
                (g.data()[idx] - fd).abs() <= 1e-8,
                "pixel {idx}: {} vs {}",
                g.data()[idx],
                fd
            );
        }
    }

    #[test]
    fn alignment_table_shape_and_noise_floor() {
        let mut rng = RngState::new(15);
        let spec = DistributionSpec::two_mode(2, 2.0, 0.5);
        let target = spec.sample(500, &mut rng).unwrap();
        let exact = spec.sample(500, &mut rng).unwrap();
        let biased = DistributionSpec::std_normal(2).sample(500, &mut rng).unwrap();
        let table = alignment_export(
            &[("exact".into(), exact), ("biased".into(), biased)],
            &target,
            24,
        )
        .unwrap();
        // bins rows per marginal per sampler (incl. the target itself).
        assert_eq!(table.marginals.len(), 24 * 2 * 3);
        let exact_mmd = table.summary.iter().find(|(n, _)| n == "exact").unwrap().1;
        let biased_mmd = table.summary.iter().find(|(n, _)| n == "biased").unwrap().1;
        assert!(exact_mmd < 0.01, "exact sampler mmd {exact_mmd}");
        assert!(biased_mmd > 5.0 * exact_mmd.max(1e-6), "biased {biased_mmd} vs exact {exact_mmd}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn mmd_symmetric(seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let x = DistributionSpec::std_normal(2).sample(12, &mut rng).unwrap();
            let y = DistributionSpec::two_mode(2, 1.5, 0.5).sample(12, &mut rng).unwrap();
            let a = mmd2(&x, &y, &[0.7, 1.3]).unwrap();
            let b = mmd2(&y, &x, &[0.7, 1.3]).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn sw_symmetric_and_nonnegative(seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let x = DistributionSpec::std_normal(2).sample(10, &mut rng).unwrap();
            let y = DistributionSpec::std_normal(2).sample(10, &mut rng).unwrap();
            let a = sliced_wasserstein(&x, &y, 16, &mut RngState::new(seed)).unwrap();
            let b = sliced_wasserstein(&y, &x, 16, &mut RngState::new(seed)).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn toy_fid_symmetric(seed in 0u64..200) {
            let mut rng = RngState::new(seed);
            let x = DistributionSpec::std_normal(2).sample(40, &mut rng).unwrap();
            let y = DistributionSpec::two_mode(2, 2.0, 0.5).sample(40, &mut rng).unwrap();
            let a = toy_fid(&x, &y, 7).unwrap();
            let b = toy_fid(&y, &x, 7).unwrap();
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }
}
