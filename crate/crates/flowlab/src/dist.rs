//! Exact samplers and analytic densities/scores for priors, toy targets, and
//! the interpolation marginals used by the posterior-mean correction.
//!
//! The central derivation: for a linear interpolation x_t = (1-t) x0 + t x1
//! with x0 ~ N(mu0, v0 I) and x1 from a diagonal Gaussian mixture, the
//! marginal of x_t is the mixture sum_k w_k N((1-t) mu0 + t mu_k,
//! (1-t)^2 v0 I + t^2 V_k), whose score is available in closed form.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    IsotropicGaussian {
        mean: Vec<f64>,
        variance: f64,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        /// Diagonal variances per component.
        variances: Vec<Vec<f64>>,
    },
    /// 2-D ring: uniform angle, radius R + sigma * N(0,1).
    Ring { radius: f64, sigma: f64 },
    /// 2-D checkerboard: uniform over the "black" cells tiling
    /// [-extent, extent]^2 with the given cell size.
    Checkerboard { cell: f64, extent: f64 },
    PointMass { location: Vec<f64> },
}

impl DistributionSpec {
    pub fn std_normal(dim: usize) -> Self {
        DistributionSpec::IsotropicGaussian { mean: vec![0.0; dim], variance: 1.0 }
    }

    /// Equal-weight two-component mixture at +/- offset along the first axis.
    pub fn two_mode(dim: usize, offset: f64, variance: f64) -> Self {
        let mut m1 = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        m1[0] = offset;
        m2[0] = -offset;
        DistributionSpec::GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![m1, m2],
            variances: vec![vec![variance; dim]; 2],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::IsotropicGaussian { mean, .. } => mean.len(),
            DistributionSpec::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            DistributionSpec::Ring { .. } | DistributionSpec::Checkerboard { .. } => 2,
            DistributionSpec::PointMass { location } => location.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistributionSpec::IsotropicGaussian { mean, variance } => {
                if mean.is_empty() {
                    return Err(Error::config("gaussian: empty mean"));
                }
                if *variance <= 0.0 {
                    return Err(Error::config(format!("gaussian: variance {variance} not positive")));
                }
            }
            DistributionSpec::GaussianMixture { weights, means, variances } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
                    return Err(Error::config("mixture: component count mismatch"));
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::config(format!("mixture: weights sum to {s}, expected 1")));
                }
                if weights.iter().any(|w| *w < 0.0) {
                    return Err(Error::config("mixture: negative weight"));
                }
                let d = means[0].len();
                for (m, v) in means.iter().zip(variances) {
                    if m.len() != d || v.len() != d {
                        return Err(Error::config("mixture: inconsistent component dimension"));
                    }
                    if v.iter().any(|x| *x <= 0.0) {
                        return Err(Error::config("mixture: non-positive variance"));
                    }
                }
            }
            DistributionSpec::Ring { radius, sigma } => {
                if *radius <= 0.0 || *sigma <= 0.0 {
                    return Err(Error::config(format!("ring: radius {radius}, sigma {sigma} must be positive")));
                }
            }
            DistributionSpec::Checkerboard { cell, extent } => {
                if *cell <= 0.0 || *extent <= 0.0 {
                    return Err(Error::config("checkerboard: cell and extent must be positive"));
                }
                let s = 2.0 * extent / cell;
                if (s - s.round()).abs() > 1e-9 || s.round() < 1.0 {
                    return Err(Error::config("checkerboard: extent must be an integer multiple of cell/2"));
                }
            }
            DistributionSpec::PointMass { location } => {
                if location.is_empty() {
                    return Err(Error::config("point mass: empty location"));
                }
            }
        }
        Ok(())
    }

    /// n i.i.d. draws as an [n, d] batch. Deterministic given `rng`.
    pub fn sample(&self, n: usize, rng: &mut RngState) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::config("sample: n must be >= 1"));
        }
        self.validate()?;
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        match self {
            DistributionSpec::IsotropicGaussian { mean, variance } => {
                let sd = variance.sqrt();
                for _ in 0..n {
                    for m in mean {
                        data.push(m + sd * rng.next_normal());
                    }
                }
            }
            DistributionSpec::GaussianMixture { weights, means, variances } => {
                for _ in 0..n {
                    let u = rng.next_uniform();
                    let mut acc = 0.0;
                    let mut k = weights.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        acc += w;
                        if u <= acc {
                            k = i;
                            break;
                        }
                    }
                    for (m, v) in means[k].iter().zip(&variances[k]) {
                        data.push(m + v.sqrt() * rng.next_normal());
                    }
                }
            }
            DistributionSpec::Ring { radius, sigma } => {
                for _ in 0..n {
                    let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
                    let rho = radius + sigma * rng.next_normal();
                    data.push(rho * theta.cos());
                    data.push(rho * theta.sin());
                }
            }
            DistributionSpec::Checkerboard { cell, extent } => {
                let side = (2.0 * extent / cell).round() as usize;
                // Black cells: (i + j) even.
                let n_black = (side * side).div_ceil(2);
                for _ in 0..n {
                    let b = rng.next_index(n_black);
                    // Enumerate black cells row-major: row i holds
                    // ceil((side - (i % 2)) / 2) black cells.
                    let per_row_even = side.div_ceil(2);
                    let per_row_odd = side / 2;
                    let pair = per_row_even + per_row_odd;
                    let two_rows = b / pair;
                    let rem = b % pair;
                    let (i, j) = if rem < per_row_even {
                        (2 * two_rows, 2 * rem)
                    } else {
                        (2 * two_rows + 1, 2 * (rem - per_row_even) + 1)
                    };
                    let x0 = -extent + i as f64 * cell;
                    let y0 = -extent + j as f64 * cell;
                    data.push(x0 + rng.uniform_in(0.0, *cell));
                    data.push(y0 + rng.uniform_in(0.0, *cell));
                }
            }
            DistributionSpec::PointMass { location } => {
                for _ in 0..n {
                    data.extend_from_slice(location);
                }
            }
        }
        Tensor::new(vec![n, d], data)
    }

    /// Exact log density. Supported for Gaussian, mixture, and ring variants.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.validate()?;
        if x.len() != self.dim() {
            return Err(Error::shape(format!("{}", self.dim()), format!("{}", x.len()), "log_density"));
        }
        match self {
            DistributionSpec::IsotropicGaussian { mean, variance } => {
                Ok(diag_gauss_logpdf(x, mean, &vec![*variance; mean.len()]))
            }
            DistributionSpec::GaussianMixture { weights, means, variances } => {
                let logs: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .zip(variances)
                    .map(|((w, m), v)| w.max(f64::MIN_POSITIVE).ln() + diag_gauss_logpdf(x, m, v))
                    .collect();
                Ok(log_sum_exp(&logs))
            }
            DistributionSpec::Ring { radius, sigma } => {
                // Polar factorization: angle uniform, radius Gaussian;
                // Jacobian 1/rho. Exact up to the negligible mass at rho < 0.
                let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
                if rho <= 0.0 {
                    return Err(Error::numeric("ring log-density at the origin"));
                }
                let z = (rho - radius) / sigma;
                Ok(-(std::f64::consts::TAU).ln() - rho.ln() - sigma.ln() - 0.5 * LN_2PI - 0.5 * z * z)
            }
            DistributionSpec::PointMass { .. } | DistributionSpec::Checkerboard { .. } => Err(
                Error::Capability(format!("log_density not defined for {self:?}")),
            ),
        }
    }

    /// Mixture-form view: (weights, means, diagonal variances). Gaussian
    /// variants only.
    fn as_mixture(&self) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        match self {
            DistributionSpec::IsotropicGaussian { mean, variance } => Ok((
                vec![1.0],
                vec![mean.clone()],
                vec![vec![*variance; mean.len()]],
            )),
            DistributionSpec::GaussianMixture { weights, means, variances } => {
                Ok((weights.clone(), means.clone(), variances.clone()))
            }
            DistributionSpec::PointMass { location } => Ok((
                vec![1.0],
                vec![location.clone()],
                vec![vec![0.0; location.len()]],
            )),
            _ => Err(Error::Capability(format!("no Gaussian-mixture form for {self:?}"))),
        }
    }

    /// Mean vector (Gaussian-family variants and point mass).
    pub fn mean(&self) -> Result<Vec<f64>> {
        let (w, m, _) = self.as_mixture()?;
        let d = m[0].len();
        let mut out = vec![0.0; d];
        for (wk, mk) in w.iter().zip(&m) {
            for (o, v) in out.iter_mut().zip(mk) {
                *o += wk * v;
            }
        }
        Ok(out)
    }

    /// Per-coordinate variance (Gaussian-family variants and point mass).
    pub fn var_diag(&self) -> Result<Vec<f64>> {
        let (w, m, v) = self.as_mixture()?;
        let mean = self.mean()?;
        let d = mean.len();
        let mut out = vec![0.0; d];
        for ((wk, mk), vk) in w.iter().zip(&m).zip(&v) {
            for i in 0..d {
                out[i] += wk * (vk[i] + mk[i] * mk[i]);
            }
        }
        for i in 0..d {
            out[i] -= mean[i] * mean[i];
        }
        Ok(out)
    }
}

fn diag_gauss_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        let d = xi - mi;
        acc += -0.5 * (LN_2PI + vi.ln()) - 0.5 * d * d / vi;
    }
    acc
}

pub(crate) fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Prior variance / observation noise pair for the conjugate-Gaussian
/// posterior-mean identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub prior_var: f64,
    pub obs_var: f64,
}

impl NoiseModel {
    pub fn new(prior_var: f64, obs_var: f64) -> Result<Self> {
        if prior_var <= 0.0 || obs_var <= 0.0 {
            return Err(Error::config("noise model variances must be positive"));
        }
        Ok(NoiseModel { prior_var, obs_var })
    }

    /// Marginal score of z when mu ~ N(0, prior_var), z | mu ~ N(mu, obs_var).
    pub fn marginal_score(&self, z: f64) -> f64 {
        -z / (self.prior_var + self.obs_var)
    }

    /// Conjugate closed form for E[mu | z]: the oracle the posterior-mean
    /// identity is checked against.
    pub fn conjugate_posterior_mean(&self, z: f64) -> f64 {
        z * self.prior_var / (self.prior_var + self.obs_var)
    }
}

/// The law of x_t = (1-t) x0 + t x1 for an isotropic-Gaussian prior and a
/// Gaussian-family target, as an explicit mixture.
pub fn induced_marginal(prior: &DistributionSpec, target: &DistributionSpec, t: f64) -> Result<DistributionSpec> {
    let (mu0, v0) = match prior {
        DistributionSpec::IsotropicGaussian { mean, variance } => (mean.clone(), *variance),
        _ => return Err(Error::Capability("induced_marginal: prior must be isotropic Gaussian".into())),
    };
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("time {t} outside [0,1]")));
    }
    let (w, means, vars) = target.as_mixture()?;
    let d = mu0.len();
    if means[0].len() != d {
        return Err(Error::shape(format!("{d}"), format!("{}", means[0].len()), "induced_marginal"));
    }
    let a = 1.0 - t;
    let mut out_means = Vec::with_capacity(means.len());
    let mut out_vars = Vec::with_capacity(vars.len());
    for (mk, vk) in means.iter().zip(&vars) {
        let m: Vec<f64> = mu0.iter().zip(mk).map(|(p, q)| a * p + t * q).collect();
        let v: Vec<f64> = vk.iter().map(|vv| a * a * v0 + t * t * vv).collect();
        if v.iter().any(|x| *x < 1e-300) {
            return Err(Error::numeric(format!("induced marginal singular at t = {t}")));
        }
        out_means.push(m);
        out_vars.push(v);
    }
    Ok(DistributionSpec::GaussianMixture { weights: w, means: out_means, variances: out_vars })
}

/// Exact score of the interpolation marginal at (x, t):
/// grad_x log p_t(x) for p_t the mixture from [`induced_marginal`].
pub fn marginal_interp_score(
    prior: &DistributionSpec,
    target: &DistributionSpec,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let marginal = induced_marginal(prior, target, t)?;
    let (w, means, vars) = marginal.as_mixture()?;
    if x.len() != means[0].len() {
        return Err(Error::shape(
            format!("{}", means[0].len()),
            format!("{}", x.len()),
            "marginal_interp_score",
        ));
    }
    // Responsibilities via log-sum-exp, then responsibility-weighted
    // component scores -(x - m) / v.
    let logs: Vec<f64> = w
        .iter()
        .zip(&means)
        .zip(&vars)
        .map(|((wk, mk), vk)| wk.max(f64::MIN_POSITIVE).ln() + diag_gauss_logpdf(x, mk, vk))
        .collect();
    let lse = log_sum_exp(&logs);
    let mut score = vec![0.0; x.len()];
    for ((lk, mk), vk) in logs.iter().zip(&means).zip(&vars) {
        let r = (lk - lse).exp();
        for i in 0..x.len() {
            score[i] += r * (-(x[i] - mk[i]) / vk[i]);
        }
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn point_mass_copies() {
        let spec = DistributionSpec::PointMass { location: vec![2.0, 2.0] };
        let mut rng = RngState::new(1);
        let s = spec.sample(3, &mut rng).unwrap();
        assert_eq!(s.data(), &[2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn gaussian_sample_moments() {
        let spec = DistributionSpec::std_normal(2);
        let mut rng = RngState::new(7);
        let n = 100_000;
        let s = spec.sample(n, &mut rng).unwrap();
        for dim in 0..2 {
            let mean: f64 = (0..n).map(|i| s.row(i)[dim]).sum::<f64>() / n as f64;
            let var: f64 = (0..n).map(|i| (s.row(i)[dim] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "var {var}");
        }
    }

    #[test]
    fn mixture_half_plane_fraction() {
        let spec = DistributionSpec::two_mode(2, 3.0, 1.0);
        let mut rng = RngState::new(13);
        let n = 100_000;
        let s = spec.sample(n, &mut rng).unwrap();
        let frac = (0..n).filter(|&i| s.row(i)[0] > 0.0).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn zero_radius_ring_rejected() {
        let spec = DistributionSpec::Ring { radius: 0.0, sigma: 0.1 };
        assert!(spec.sample(1, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn std_normal_log_density_at_zero() {
        let spec = DistributionSpec::std_normal(1);
        let v = spec.log_density(&[0.0]).unwrap();
        assert_abs_diff_eq!(v, -0.9189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_mixture_equals_component() {
        let single = DistributionSpec::IsotropicGaussian { mean: vec![1.0, -1.0], variance: 2.0 };
        let double = DistributionSpec::GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![1.0, -1.0]; 2],
            variances: vec![vec![2.0, 2.0]; 2],
        };
        for x in [[0.0, 0.0], [2.5, 1.0], [-3.0, 4.0]] {
            assert_abs_diff_eq!(
                single.log_density(&x).unwrap(),
                double.log_density(&x).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn far_tail_stays_finite() {
        let spec = DistributionSpec::two_mode(1, 1.0, 1.0);
        let v = spec.log_density(&[60.0]).unwrap();
        assert!(v.is_finite(), "log density {v}");
        assert!(v < -1000.0);
    }

    #[test]
    fn unsupported_density_is_capability_error() {
        let pm = DistributionSpec::PointMass { location: vec![0.0] };
        assert!(matches!(pm.log_density(&[0.0]), Err(Error::Capability(_))));
        let cb = DistributionSpec::Checkerboard { cell: 1.0, extent: 2.0 };
        assert!(matches!(cb.log_density(&[0.0, 0.0]), Err(Error::Capability(_))));
    }

    #[test]
    fn ring_density_integrates_against_sampler() {
        // Spot-check the ring closed form at sampled points against the
        // polar factorization evaluated by hand.
        let spec = DistributionSpec::Ring { radius: 2.0, sigma: 0.1 };
        let ld = spec.log_density(&[2.0, 0.0]).unwrap();
        // rho = 2: -ln(2 pi) - ln 2 - ln(0.1) - 0.5 ln(2 pi)
        let expected = -(std::f64::consts::TAU).ln() - 2.0f64.ln() - 0.1f64.ln() - 0.5 * LN_2PI;
        assert_abs_diff_eq!(ld, expected, epsilon = 1e-12);
    }

    #[test]
    fn single_gaussian_interp_score_closed_form() {
        // target = N(m, I), prior = N(0, I):
        // score(x, t) = -(x - t m) / ((1-t)^2 + t^2)
        let prior = DistributionSpec::std_normal(2);
        let target = DistributionSpec::IsotropicGaussian { mean: vec![2.0, -1.0], variance: 1.0 };
        for t in [0.0, 0.3, 0.7, 0.95] {
            let x = [0.8, 0.4];
            let s = marginal_interp_score(&prior, &target, &x, t).unwrap();
            let denom = (1.0 - t) * (1.0 - t) + t * t;
            for i in 0..2 {
                let expected = -(x[i] - t * [2.0, -1.0][i]) / denom;
                assert_abs_diff_eq!(s[i], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn score_at_zero_time_is_prior_score() {
        let prior = DistributionSpec::IsotropicGaussian { mean: vec![0.0, 0.0], variance: 4.0 };
        let target = DistributionSpec::two_mode(2, 3.0, 0.5);
        let x = [1.5, -2.5];
        let s = marginal_interp_score(&prior, &target, &x, 0.0).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(s[i], -x[i] / 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn point_mass_target_singular_at_one() {
        let prior = DistributionSpec::std_normal(1);
        let target = DistributionSpec::PointMass { location: vec![1.0] };
        assert!(marginal_interp_score(&prior, &target, &[0.5], 0.5).is_ok());
        assert!(matches!(
            marginal_interp_score(&prior, &target, &[0.5], 1.0),
            Err(Error::Numeric(_))
        ));
    }

    /// Finite-difference oracle: the score must equal the numerical gradient
    /// of the induced-mixture log density at random (x, t).
    #[test]
    fn score_matches_log_density_gradient() {
        let prior = DistributionSpec::std_normal(2);
        let target = DistributionSpec::GaussianMixture {
            weights: vec![0.3, 0.5, 0.2],
            means: vec![vec![2.0, 0.0], vec![-1.0, 1.5], vec![0.0, -2.0]],
            variances: vec![vec![0.5, 1.0], vec![1.5, 0.25], vec![1.0, 1.0]],
        };
        let mut rng = RngState::new(314);
        let h = 1e-5;
        for _ in 0..100 {
            let x = [rng.uniform_in(-3.0, 3.0), rng.uniform_in(-3.0, 3.0)];
            let t = rng.uniform_in(0.0, 0.999);
            let marginal = induced_marginal(&prior, &target, t).unwrap();
            let score = marginal_interp_score(&prior, &target, &x, t).unwrap();
            for i in 0..2 {
                let mut xp = x;
                xp[i] += h;
                let mut xm = x;
                xm[i] -= h;
                let fd = (marginal.log_density(&xp).unwrap() - marginal.log_density(&xm).unwrap()) / (2.0 * h);
                assert!(
                    (score[i] - fd).abs() <= 1e-6,
                    "score {} vs fd {} at x={x:?} t={t}",
                    score[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn sampler_density_consistency() {
        // Average log density over draws matches the negative differential
        // entropy within 3 standard errors.
        let v: f64 = 2.0;
        let d = 2usize;
        let spec = DistributionSpec::IsotropicGaussian { mean: vec![0.5, -0.5], variance: v };
        let n = 100_000;
        let mut rng = RngState::new(77);
        let s = spec.sample(n, &mut rng).unwrap();
        let avg: f64 = (0..n).map(|i| spec.log_density(s.row(i)).unwrap()).sum::<f64>() / n as f64;
        let neg_entropy = -0.5 * d as f64 * (LN_2PI + 1.0 + v.ln());
        let se = (d as f64 / 2.0 / n as f64).sqrt();
        assert!(
            (avg - neg_entropy).abs() < 3.0 * se,
            "avg {avg} vs -H {neg_entropy} (se {se})"
        );
    }

    #[test]
    fn interpolation_marginal_law_moments() {
        let prior = DistributionSpec::std_normal(2);
        let target = DistributionSpec::two_mode(2, 3.0, 0.5);
        let n = 60_000;
        for (i, t) in [0.25, 0.5, 0.75].into_iter().enumerate() {
            let mut rng = RngState::new(1000 + i as u64);
            let x0 = prior.sample(n, &mut rng).unwrap();
            let x1 = target.sample(n, &mut rng).unwrap();
            let marginal = induced_marginal(&prior, &target, t).unwrap();
            let m_true = marginal.mean().unwrap();
            let v_true = marginal.var_diag().unwrap();
            for dim in 0..2 {
                let vals: Vec<f64> = (0..n)
                    .map(|r| (1.0 - t) * x0.row(r)[dim] + t * x1.row(r)[dim])
                    .collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let se_mean = (v_true[dim] / n as f64).sqrt();
                assert!(
                    (mean - m_true[dim]).abs() < 5.0 * se_mean,
                    "t={t} dim={dim}: mean {mean} vs {}",
                    m_true[dim]
                );
                // Loose CLT bound for the variance estimate.
                assert!(
                    (var - v_true[dim]).abs() < 0.05 * v_true[dim].max(1.0),
                    "t={t} dim={dim}: var {var} vs {}",
                    v_true[dim]
                );
            }
        }
    }

    #[test]
    fn checkerboard_stays_in_black_cells() {
        let spec = DistributionSpec::Checkerboard { cell: 1.0, extent: 2.0 };
        let mut rng = RngState::new(5);
        let s = spec.sample(2000, &mut rng).unwrap();
        for i in 0..2000 {
            let p = s.row(i);
            assert!(p[0] >= -2.0 && p[0] <= 2.0 && p[1] >= -2.0 && p[1] <= 2.0);
            let ci = ((p[0] + 2.0) / 1.0).floor() as i64;
            let cj = ((p[1] + 2.0) / 1.0).floor() as i64;
            assert_eq!((ci + cj) % 2, 0, "point {p:?} landed on a white cell");
        }
    }

    #[test]
    fn mixture_weight_validation() {
        let bad = DistributionSpec::GaussianMixture {
            weights: vec![0.6, 0.6],
            means: vec![vec![0.0], vec![1.0]],
            variances: vec![vec![1.0], vec![1.0]],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conjugate_noise_model() {
        let nm = NoiseModel::new(4.0, 1.0).unwrap();
        // E[mu | z] = z * tau^2 / (tau^2 + sigma^2)
        assert_abs_diff_eq!(nm.conjugate_posterior_mean(2.5), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nm.marginal_score(2.5), -0.5, epsilon = 1e-12);
    }
}
