//! Evaluation against ground truth: denoiser error relative to the oracle
//! posterior mean, sliced Wasserstein-2 between sample sets, the
//! memorization attack, and a conservativeness diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::rng::{gaussian_vec, tag, SeedTree};
use crate::sampler::{posterior_sample, SamplerConfig};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub sigma_eval: f64,
    pub relative_mse: f64,
    pub absolute_mse: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMseReport {
    pub model_id: String,
    pub oracle_id: String,
    pub rows: Vec<MseRow>,
}

impl DenoiserMseReport {
    pub fn with_ids(mut self, model: impl Into<String>, oracle: impl Into<String>) -> Self {
        self.model_id = model.into();
        self.oracle_id = oracle.into();
        self
    }

    pub fn row(&self, sigma: f64) -> Option<&MseRow> {
        self.rows.iter().find(|r| r.sigma_eval == sigma)
    }
}

/// Squared errors at one noise level, point by point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointErrors {
    pub sigma: f64,
    pub errors: Vec<f64>,
    pub target_norms: Vec<f64>,
}

fn sorted_levels(schedule: &NoiseSchedule, sigmas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.is_empty() {
        return Err(Error::Empty("evaluation σ list"));
    }
    let top = schedule.sigma_max();
    let mut out = sigmas.to_vec();
    if let Some(bad) = out.iter().find(|s| !(**s > 0.0 && **s <= top)) {
        return Err(Error::domain(format!("evaluation σ = {bad} outside (0, {top}]")));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

/// Test points at level σ depend only on `(seed, σ, index)`, so two models
/// evaluated with the same seed see identical draws.
pub fn pointwise_errors<D: Denoiser + ?Sized>(
    denoiser: &D,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    sigmas: &[f64],
    n_points: usize,
    seed: u64,
) -> Result<Vec<PointErrors>> {
    if n_points == 0 {
        return Err(Error::Empty("evaluation points"));
    }
    if denoiser.dim() != mixture.dim() {
        return Err(Error::Dimension {
            expected: mixture.dim(),
            got: denoiser.dim(),
        });
    }
    let tree = SeedTree::new(seed).child(&[tag::EVAL]);
    sorted_levels(schedule, sigmas)?
        .into_iter()
        .map(|sigma| {
            let t = schedule.time_at_sigma(sigma)?;
            let pairs: Vec<(f64, f64)> = (0..n_points)
                .into_par_iter()
                .map(|i| {
                    let mut rng = tree.stream(&[sigma.to_bits(), i as u64]);
                    let x0 = mixture.sample_one(&mut rng);
                    let z = gaussian_vec(&mut rng, mixture.dim());
                    let x_t = schedule.forward_noise(&x0, 0.0, t, &z)?;
                    let target = mixture.posterior_mean(&x_t, t, schedule)?;
                    let est = denoiser.denoise(&x_t, t, schedule)?;
                    let err: f64 = est.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
                    let norm: f64 = target.iter().map(|v| v * v).sum();
                    Ok((err, norm))
                })
                .collect::<Result<_>>()?;
            let (errors, target_norms) = pairs.into_iter().unzip();
            Ok(PointErrors {
                sigma,
                errors,
                target_norms,
            })
        })
        .collect()
}

pub fn denoiser_mse_grid<D: Denoiser + ?Sized>(
    denoiser: &D,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    sigmas: &[f64],
    n_points: usize,
    seed: u64,
) -> Result<DenoiserMseReport> {
    let rows = pointwise_errors(denoiser, mixture, schedule, sigmas, n_points, seed)?
        .into_iter()
        .map(|p| {
            let n = p.errors.len() as f64;
            let absolute = p.errors.iter().sum::<f64>() / n;
            let scale = p.target_norms.iter().sum::<f64>() / n;
            MseRow {
                sigma_eval: p.sigma,
                relative_mse: if scale > 0.0 { absolute / scale } else { absolute },
                absolute_mse: absolute,
                n_points: p.errors.len(),
            }
        })
        .collect();
    Ok(DenoiserMseReport {
        model_id: "model".into(),
        oracle_id: format!("mixture-{}x{}", mixture.weights().len(), mixture.dim()),
        rows,
    })
}

/// Mean of `err_a − err_b` on shared draws, relative to the oracle scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub sigma_eval: f64,
    pub mean_difference: f64,
    pub std_error: f64,
}

impl PairedRow {
    /// |mean| / standard error; infinite when the differences are constant
    /// and nonzero.
    pub fn z_score(&self) -> f64 {
        if self.std_error > 0.0 {
            self.mean_difference / self.std_error
        } else if self.mean_difference == 0.0 {
            0.0
        } else {
            self.mean_difference.signum() * f64::INFINITY
        }
    }
}

pub fn paired_mse_difference<A: Denoiser + ?Sized, B: Denoiser + ?Sized>(
    a: &A,
    b: &B,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    sigmas: &[f64],
    n_points: usize,
    seed: u64,
) -> Result<Vec<PairedRow>> {
    let ea = pointwise_errors(a, mixture, schedule, sigmas, n_points, seed)?;
    let eb = pointwise_errors(b, mixture, schedule, sigmas, n_points, seed)?;
    Ok(ea
        .iter()
        .zip(&eb)
        .map(|(pa, pb)| {
            let n = pa.errors.len() as f64;
            let scale = pa.target_norms.iter().sum::<f64>() / n;
            let scale = if scale > 0.0 { scale } else { 1.0 };
            let d: Vec<f64> = pa.errors.iter().zip(&pb.errors).map(|(x, y)| (x - y) / scale).collect();
            let mean = d.iter().sum::<f64>() / n;
            let var = if n > 1.0 {
                d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            PairedRow {
                sigma_eval: pa.sigma,
                mean_difference: mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect())
}

/// Unit vectors drawn uniformly on the sphere.
pub fn random_directions(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeedTree::new(seed).stream(&[tag::PROJECTION]);
    (0..n)
        .map(|_| loop {
            let v = gaussian_vec(&mut rng, dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// W2 between the empirical measures of two sorted samples of any sizes.
pub fn wasserstein2_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / n as f64).sqrt();
    }
    // Quantile breakpoints in units of 1/(n·m).
    let (n64, m64) = (n as u128, m as u128);
    let (mut i, mut j, mut cur, mut acc) = (0usize, 0usize, 0u128, 0.0);
    while i < n && j < m {
        let next_a = (i as u128 + 1) * m64;
        let next_b = (j as u128 + 1) * n64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += (next - cur) as f64 * d * d;
        cur = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    (acc / (n64 * m64) as f64).sqrt()
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let dim = a[0].len();
    for s in a.iter().chain(b) {
        if s.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: s.len(),
            });
        }
    }
    Ok(dim)
}

/// Sliced W2 over a fixed set of directions.
pub fn sliced_wasserstein2_with(a: &[Vec<f64>], b: &[Vec<f64>], directions: &[Vec<f64>]) -> Result<f64> {
    let dim = check_samples(a, b)?;
    if directions.is_empty() {
        return Err(Error::Empty("projection directions"));
    }
    if let Some(d) = directions.iter().find(|d| d.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: d.len(),
        });
    }
    let project = |set: &[Vec<f64>], dir: &[f64]| {
        let mut p: Vec<f64> = set.iter().map(|x| x.iter().zip(dir).map(|(u, v)| u * v).sum()).collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let per: Vec<f64> = directions
        .par_iter()
        .map(|dir| wasserstein2_1d_sorted(&project(a, dir), &project(b, dir)))
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn sliced_wasserstein2(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, seed: u64) -> Result<f64> {
    let dim = check_samples(a, b)?;
    sliced_wasserstein2_with(a, b, &random_directions(dim, n_projections, seed))
}

pub const SIMILARITY_THRESHOLDS: [f64; 3] = [0.9, 0.95, 0.99];
pub const SIMILARITY_BINS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub model_id: String,
    pub sigma_attack: f64,
    /// `SIMILARITY_BINS + 1` edges spanning [−1, 1].
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub thresholds: [f64; 3],
    /// Fraction strictly above each threshold.
    pub fractions: [f64; 3],
    pub sample_count: u64,
}

impl SimilarityReport {
    pub fn fraction_above(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|t| *t == threshold).map(|i| self.fractions[i])
    }

    /// Binomial standard error of a threshold fraction.
    pub fn std_error(&self, threshold: f64) -> Option<f64> {
        let p = self.fraction_above(threshold)?;
        Some((p * (1.0 - p) / self.sample_count as f64).sqrt())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Highest cosine similarity of `x` to any reference point.
pub fn nearest_similarity(x: &[f64], references: &[Vec<f64>]) -> f64 {
    references.iter().map(|r| cosine_similarity(x, r)).fold(f64::NEG_INFINITY, f64::max)
}

/// Histogram and threshold fractions of nearest-neighbor similarities.
pub fn similarity_report(samples: &[Vec<f64>], references: &[Vec<f64>], sigma_attack: f64) -> Result<SimilarityReport> {
    check_samples(samples, references)?;
    let sims: Vec<f64> = samples.par_iter().map(|s| nearest_similarity(s, references)).collect();
    let width = 2.0 / SIMILARITY_BINS as f64;
    let bin_edges = (0..=SIMILARITY_BINS).map(|i| -1.0 + i as f64 * width).collect();
    let mut counts = vec![0u64; SIMILARITY_BINS];
    for s in &sims {
        let bin = (((s + 1.0) / width) as usize).min(SIMILARITY_BINS - 1);
        counts[bin] += 1;
    }
    let n = sims.len() as f64;
    let fractions = SIMILARITY_THRESHOLDS.map(|th| sims.iter().filter(|s| **s > th).count() as f64 / n);
    Ok(SimilarityReport {
        model_id: "model".into(),
        sigma_attack,
        bin_edges,
        counts,
        thresholds: SIMILARITY_THRESHOLDS,
        fractions,
        sample_count: sims.len() as u64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub sigma_attack: f64,
    /// Noise level of the data the model was trained on.
    pub train_sigma: f64,
    pub n_per_point: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

/// Noises each point to `σ_attack`, posterior-samples it back with the
/// model, and scores every reconstruction against its nearest point.
pub fn memorization_attack<D: Denoiser + ?Sized>(
    denoiser: &D,
    points: &[Vec<f64>],
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
) -> Result<SimilarityReport> {
    if !(cfg.sigma_attack > cfg.train_sigma) {
        return Err(Error::domain(format!(
            "attack level σ = {} must exceed the training level {}",
            cfg.sigma_attack, cfg.train_sigma
        )));
    }
    if cfg.n_per_point == 0 {
        return Err(Error::Empty("attack draws per point"));
    }
    check_samples(points, points)?;
    let t = schedule.time_at_sigma(cfg.sigma_attack)?;
    let tree = SeedTree::new(cfg.seed).child(&[tag::ATTACK]);
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|j| (0..cfg.n_per_point).map(move |k| (j, k)))
        .collect();
    let recon: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(j, k)| {
            let mut rng = tree.stream(&[j as u64, k as u64]);
            let z = gaussian_vec(&mut rng, points[j].len());
            let x_t = schedule.forward_noise(&points[j], 0.0, t, &z)?;
            posterior_sample(denoiser, &x_t, t, schedule, &cfg.sampler, &mut rng)
        })
        .collect::<Result<_>>()?;
    similarity_report(&recon, points, cfg.sigma_attack)
}

/// Mean `|J₀₁ − J₁₀| / 2` of the input Jacobian of the residual field
/// `(h(x, t) − x)/σ_t²` over probe points; zero for a gradient field.
pub fn conservativeness_diagnostic<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: f64,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    if denoiser.dim() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: denoiser.dim(),
        });
    }
    if n_probes == 0 {
        return Err(Error::Empty("probes"));
    }
    let sigma = schedule.sigma(t)?;
    if sigma <= 0.0 {
        return Err(Error::domain("diagnostic needs σ_t > 0"));
    }
    let alpha = schedule.alpha_of_sigma(sigma);
    let spread = (alpha * alpha + sigma * sigma).sqrt();
    let tree = SeedTree::new(seed).child(&[tag::EVAL, 2]);
    let vals: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree.stream(&[i as u64]);
            let x: Vec<f64> = gaussian_vec(&mut rng, 2).iter().map(|z| spread * z).collect();
            let col0 = denoiser.jvp(&x, t, schedule, &[1.0, 0.0])?;
            let col1 = denoiser.jvp(&x, t, schedule, &[0.0, 1.0])?;
            // The identity in h − x is symmetric and drops out.
            Ok((col1[0] - col0[1]).abs() / (2.0 * sigma * sigma))
        })
        .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / n_probes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::FnDenoiser;
    use crate::net::{Activation, Architecture, DenoiserNet};

    fn ve() -> NoiseSchedule {
        NoiseSchedule::ve_identity(3.0, 0.5).unwrap()
    }

    #[test]
    fn oracle_against_itself_is_zero() {
        let gm = GaussianMixture::ring8();
        let r = denoiser_mse_grid(&gm, &gm, &ve(), &[1.0, 0.1, 3.0], 200, 1).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.sigma_eval).collect::<Vec<_>>(), vec![0.1, 1.0, 3.0]);
        assert!(r.rows.iter().all(|r| r.relative_mse == 0.0 && r.absolute_mse == 0.0));
    }

    #[test]
    fn zero_denoiser_on_standard_normal_is_one() {
        let gm = GaussianMixture::standard(3);
        let zero = FnDenoiser::new(3, |_x: &[f64], _t| vec![0.0; 3]);
        let r = denoiser_mse_grid(&zero, &gm, &ve(), &[0.3, 2.0], 500, 4).unwrap();
        assert!(r.rows.iter().all(|r| (r.relative_mse - 1.0).abs() < 1e-12));
    }

    #[test]
    fn grid_rejects_out_of_range() {
        let gm = GaussianMixture::two_point();
        assert!(denoiser_mse_grid(&gm, &gm, &ve(), &[3.5], 10, 1).is_err());
        assert!(denoiser_mse_grid(&gm, &gm, &ve(), &[0.0], 10, 1).is_err());
    }

    #[test]
    fn paired_rows_share_draws() {
        let gm = GaussianMixture::two_point();
        let rows = paired_mse_difference(&gm, &gm, &gm, &ve(), &[0.5, 1.0], 100, 3).unwrap();
        assert!(rows.iter().all(|r| r.mean_difference == 0.0 && r.z_score() == 0.0));
    }

    #[test]
    fn w1d_examples() {
        assert_eq!(wasserstein2_1d_sorted(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
        // {0,1} vs {0.5}: every quantile is 0.5 away.
        assert!((wasserstein2_1d_sorted(&[0.0, 1.0], &[0.5]) - 0.5).abs() < 1e-15);
        // {0,1,2} vs {0,2}: quantile gaps 0, 1 (on 1/6 + 1/6), 0.
        let v = wasserstein2_1d_sorted(&[0.0, 1.0, 2.0], &[0.0, 2.0]);
        assert!((v - (1.0f64 / 3.0).sqrt()).abs() < 1e-15, "{v}");
    }

    #[test]
    fn sliced_w2_basics() {
        let a = vec![vec![0.0], vec![0.0]];
        let b = vec![vec![1.0], vec![1.0]];
        assert!((sliced_wasserstein2(&a, &b, 16, 1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sliced_wasserstein2(&a, &a, 16, 1).unwrap(), 0.0);
        assert!(sliced_wasserstein2(&a, &[vec![1.0, 2.0]], 4, 1).is_err());
        assert!(sliced_wasserstein2(&a, &[], 4, 1).is_err());
    }

    #[test]
    fn similarity_histogram_counts() {
        let refs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let samples = vec![vec![2.0, 0.0], vec![1.0, 1.0], vec![-1.0, -0.01], vec![0.0, 0.0]];
        let r = similarity_report(&samples, &refs, 1.0).unwrap();
        assert_eq!(r.counts.iter().sum::<u64>(), 4);
        assert_eq!(r.fractions, [0.25, 0.25, 0.25]);
        assert_eq!(r.bin_edges.len(), SIMILARITY_BINS + 1);
        assert_eq!(*r.counts.last().unwrap(), 1);
    }

    #[test]
    fn attack_precondition() {
        let gm = GaussianMixture::ring8();
        let cfg = AttackConfig {
            sigma_attack: 0.5,
            train_sigma: 0.5,
            n_per_point: 1,
            sampler: SamplerConfig::default(),
            seed: 1,
        };
        assert!(memorization_attack(&gm, gm.means(), &ve(), &cfg).is_err());
    }

    #[test]
    fn oracle_is_conservative() {
        let gm = GaussianMixture::ring8();
        let d = conservativeness_diagnostic(&gm, &ve(), 1.0, 32, 5).unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn antisymmetric_linear_field() {
        // Single linear layer reading only the data inputs: F(u) = W u with
        // W = k·[[0, 1], [−1, 0]], so the residual Jacobian is
        // c_out·c_in·W/σ² = [[0, 1], [−1, 0]] when k = σ²/(c_out c_in).
        let s = ve();
        let t = 1.5;
        let sigma = 1.5f64;
        let c = 1.0 / (1.0 + sigma * sigma);
        let k = sigma * sigma / (sigma * c);
        let arch = Architecture::new(2, vec![], 2, Activation::Relu).unwrap();
        let mut params = vec![0.0; arch.param_count()];
        // Row-major [fan_out][fan_in] with fan_in = 2 data + 2 embedding.
        params[1] = k;
        params[4] = -k;
        let net = DenoiserNet::from_params(arch, params).unwrap();
        let d = conservativeness_diagnostic(&net, &s, t, 16, 1).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
        assert!(conservativeness_diagnostic(&GaussianMixture::two_point(), &s, t, 4, 1).is_err());
    }

    #[test]
    fn random_net_is_not_conservative() {
        let arch = Architecture::new(2, vec![16], 4, Activation::Silu).unwrap();
        let net = DenoiserNet::init(arch, 3);
        assert!(conservativeness_diagnostic(&net, &ve(), 1.0, 16, 2).unwrap() > 0.0);
    }
}
