//! Gaussian-mixture ground truth.
//!
//! For a diagonal-covariance mixture prior every quantity a diffusion model
//! tries to learn is available in closed form: the posterior mean
//! `E[X_0 | X_t]`, the score, and `log p_t`. Trained denoisers are judged
//! against these.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::gaussian_vec;
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::config(format!(
                "mixture has {k} weights but {} means and {} variance vectors",
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::config("mixture dimension must be positive"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("mixture weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        for (m, v) in means.iter().zip(&variances) {
            if m.len() != dim || v.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: if m.len() != dim { m.len() } else { v.len() },
                });
            }
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::config("mixture variances must be positive"));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::config("mixture means must be finite"));
            }
        }
        Ok(Self {
            dim,
            weights,
            means,
            variances,
        })
    }

    /// M1: standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![vec![1.0; dim]]).expect("valid preset")
    }

    /// M2: equal-weight near-point masses at ±2 on the line.
    pub fn two_point() -> Self {
        Self::new(
            vec![0.5, 0.5],
            vec![vec![-2.0], vec![2.0]],
            vec![vec![1e-12], vec![1e-12]],
        )
        .expect("valid preset")
    }

    /// M3: eight equal components on a circle of radius 4, variance 0.09.
    pub fn ring8() -> Self {
        let means = (0..8)
            .map(|i| {
                let angle = std::f64::consts::TAU * i as f64 / 8.0;
                vec![4.0 * angle.cos(), 4.0 * angle.sin()]
            })
            .collect();
        Self::new(vec![0.125; 8], means, vec![vec![0.09, 0.09]; 8]).expect("valid preset")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "m1" => Ok(Self::standard(1)),
            "m1-2d" => Ok(Self::standard(2)),
            "m2" => Ok(Self::two_point()),
            "m3" | "ring8" => Ok(Self::ring8()),
            other => Err(Error::config(format!("unknown mixture preset `{other}`"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, mi) in out.iter_mut().zip(m) {
                *o += w * mi;
            }
        }
        out
    }

    /// Law of `α X_0 + σ Z` as another mixture.
    pub fn noised(&self, alpha: f64, sigma: f64) -> Self {
        Self {
            dim: self.dim,
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|x| alpha * x).collect())
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|v| v.iter().map(|x| alpha * alpha * x + sigma * sigma).collect())
                .collect(),
        }
    }

    fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // Rounding in the cumulative sum; fall back to the last component with mass.
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.pick_component(rng);
        let z = gaussian_vec(rng, self.dim);
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .zip(z)
            .map(|((m, v), z)| m + v.sqrt() * z)
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Log responsibilities (unnormalized) of each component for an observation
    /// `y = α X_0 + σ Z`, plus their log-sum-exp.
    fn log_joint(&self, y: &[f64], alpha: f64, sigma: f64) -> (Vec<f64>, f64) {
        let s2 = sigma * sigma;
        let a2 = alpha * alpha;
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| {
                if *w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut acc = w.ln();
                for ((yi, mi), vi) in y.iter().zip(m).zip(v) {
                    let tau = a2 * vi + s2;
                    let d = yi - alpha * mi;
                    acc -= 0.5 * (LN_2PI + tau.ln() + d * d / tau);
                }
                acc
            })
            .collect();
        let lse = log_sum_exp(&logs);
        (logs, lse)
    }

    /// `E[X_0 | α X_0 + σ Z = y]`.
    pub fn posterior_mean_affine(&self, y: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        if sigma == 0.0 && alpha == 1.0 {
            return y.to_vec();
        }
        let (logs, lse) = self.log_joint(y, alpha, sigma);
        let s2 = sigma * sigma;
        let mut out = vec![0.0; self.dim];
        for (lr, (m, v)) in logs.iter().zip(self.means.iter().zip(&self.variances)) {
            let r = (lr - lse).exp();
            if r == 0.0 {
                continue;
            }
            for (((o, yi), mi), vi) in out.iter_mut().zip(y).zip(m).zip(v) {
                let tau = alpha * alpha * vi + s2;
                *o += r * (mi + alpha * vi / tau * (yi - alpha * mi));
            }
        }
        out
    }

    /// `E[X_0 | X_t = x_t]`.
    pub fn posterior_mean(&self, x_t: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dim(x_t)?;
        let sigma = schedule.sigma(t)?;
        if sigma == 0.0 {
            return Ok(x_t.to_vec());
        }
        Ok(self.posterior_mean_affine(x_t, schedule.alpha_of_sigma(sigma), sigma))
    }

    /// `E[X_{t_n} | X_t = x_t]` for `t ≥ t_n`, using that `X_{t_n}` is itself
    /// a mixture and `X_t` is a Gaussian transition of it.
    pub fn nature_posterior_mean(&self, x_t: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dim(x_t)?;
        let sn = schedule.sigma_nature();
        let s = schedule.sigma(t)?;
        if t < schedule.t_nature() {
            return Err(Error::domain(format!(
                "E[X_tn | X_t] needs t ≥ t_n, got {t}"
            )));
        }
        let nature = self.noised(schedule.alpha_of_sigma(sn), sn);
        let (scale, std) = schedule.transition(sn, s);
        if std == 0.0 {
            return Ok(x_t.iter().map(|x| x / scale).collect());
        }
        Ok(nature.posterior_mean_affine(x_t, scale, std))
    }

    /// `∇ log p_t(x_t) = (α_t E[X_0|x_t] − x_t) / σ_t²`.
    pub fn score(&self, x_t: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dim(x_t)?;
        let sigma = schedule.sigma(t)?;
        if sigma == 0.0 {
            return Err(Error::domain("score undefined at σ = 0"));
        }
        let alpha = schedule.alpha_of_sigma(sigma);
        let pm = self.posterior_mean_affine(x_t, alpha, sigma);
        let s2 = sigma * sigma;
        Ok(pm.iter().zip(x_t).map(|(m, x)| (alpha * m - x) / s2).collect())
    }

    pub fn log_density_t(&self, x_t: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<f64> {
        self.check_dim(x_t)?;
        let sigma = schedule.sigma(t)?;
        Ok(self.log_joint(x_t, schedule.alpha_of_sigma(sigma), sigma).1)
    }

    /// Per-component terms `log w_i + log N(x_t; ·)` whose log-sum-exp is `log p_t`.
    pub fn component_log_terms(&self, x_t: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dim(x_t)?;
        let sigma = schedule.sigma(t)?;
        Ok(self.log_joint(x_t, schedule.alpha_of_sigma(sigma), sigma).0)
    }

    /// Self-normalized importance estimate of `E[X_0 | X_t = x_t]` with the
    /// prior as proposal.
    pub fn mc_posterior_mean<R: Rng + ?Sized>(
        &self,
        x_t: &[f64],
        t: f64,
        schedule: &NoiseSchedule,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_dim(x_t)?;
        if n == 0 {
            return Err(Error::Empty("Monte Carlo sample count"));
        }
        let sigma = schedule.sigma(t)?;
        if sigma == 0.0 {
            return Err(Error::domain("Monte Carlo posterior mean needs σ_t > 0"));
        }
        let alpha = schedule.alpha_of_sigma(sigma);
        let inv = 0.5 / (sigma * sigma);
        let draws = self.sample(n, rng);
        let logw: Vec<f64> = draws
            .iter()
            .map(|x0| {
                -inv * x_t
                    .iter()
                    .zip(x0)
                    .map(|(x, z)| (x - alpha * z).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Degenerate(format!(
                "all importance weights vanished (max log-weight {max})"
            )));
        }
        let mut total = 0.0;
        let mut out = vec![0.0; self.dim];
        for (x0, lw) in draws.iter().zip(&logw) {
            let w = (lw - max).exp();
            total += w;
            for (o, v) in out.iter_mut().zip(x0) {
                *o += w * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        Ok(out)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Noisy observations `X_{t_n}` of the prior; the only data training sees.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub samples: Vec<Vec<f64>>,
}

impl NoisyDataset {
    pub fn new(schedule: NoiseSchedule, seed: u64, samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("dataset samples"));
        }
        let dim = samples[0].len();
        if dim == 0 {
            return Err(Error::config("dataset dimension must be positive"));
        }
        if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self {
            schedule,
            seed,
            samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }
}
