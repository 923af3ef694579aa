//! Training objectives.
//!
//! * clean denoising score matching (baseline, needs `X_0`);
//! * ambient denoising score matching, which only sees `X_{t_n}` and
//!   regresses `c_h·h(x_t, t) + c_x·x_t` onto `x_{t_n}` for `t > t_n`;
//! * the consistency loss, estimated with two independent one-step
//!   transitions of the model's own reverse chain.
//!
//! Every loss is the batch mean of a per-element squared norm (summed over
//! coordinates). Per-element randomness comes from `tree.stream(&[i])`, and
//! gradients are reduced over fixed chunks in index order, so results do not
//! depend on the number of worker threads.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::net::{DenoiserNet, GradientBuffer};
use crate::rng::{gaussian_vec, tag, SeedTree, StreamRng};
use crate::sampler::{run_chain, stochastic_update, SamplerKind, DEFAULT_GRID_RHO};
use crate::schedule::NoiseSchedule;

const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Regression term: ambient DSM, or clean DSM for the baseline.
    pub ambient_dsm: f64,
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBatchReport {
    pub loss: f64,
    pub grad: GradientBuffer,
    pub breakdown: LossBreakdown,
    pub lambda: f64,
    pub count: usize,
    /// Diffusion times drawn for each element, in batch order.
    pub times: Vec<f64>,
}

impl LossBatchReport {
    fn check(self) -> Result<Self> {
        if !self.loss.is_finite() {
            return Err(Error::non_finite(format!("loss value {}", self.loss)));
        }
        self.grad.check_finite()?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Dsm,
    Ambient,
    AmbientConsistency,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dsm => "dsm",
            LossKind::Ambient => "ambient",
            LossKind::AmbientConsistency => "ambient+consistency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dsm" => Ok(LossKind::Dsm),
            "ambient" => Ok(LossKind::Ambient),
            "ambient+consistency" => Ok(LossKind::AmbientConsistency),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    /// Width of the `t'' ∈ [t' − eps, t')` window; `t' > eps`.
    pub eps: f64,
    /// Stochastic steps used to reach `x_{t'}` from `x_t`.
    pub chain_steps: usize,
    /// For `t' > t_n`, draw `x_{t'}` by forward-noising the data instead of
    /// running the model chain.
    pub forward_above_nature: bool,
    pub rho: f64,
}

impl ConsistencyConfig {
    pub fn for_schedule(schedule: &NoiseSchedule) -> Self {
        Self {
            eps: schedule.t_max() / 100.0,
            chain_steps: 8,
            forward_above_nature: false,
            rho: DEFAULT_GRID_RHO,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < schedule.t_max()) {
            return Err(Error::config(format!("consistency eps must lie in (0, T), got {}", self.eps)));
        }
        if self.chain_steps == 0 {
            return Err(Error::config("consistency chain needs at least one step"));
        }
        Ok(())
    }
}

/// Stratified uniform draws on `(lo, hi]`: one point per cell of an even grid.
pub fn stratified_times<R: Rng + ?Sized>(lo: f64, hi: f64, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let u = (i as f64 + 1.0 - rng.gen::<f64>()) / n as f64;
            lo + u * (hi - lo)
        })
        .collect()
}

/// One `(t, η)` pair for a regression loss.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionDraw {
    pub t: f64,
    pub noise: Vec<f64>,
}

/// Stratified times on `(lo, hi]` plus per-element Gaussian noise.
pub fn regression_draws(tree: &SeedTree, count: usize, dim: usize, lo: f64, hi: f64) -> Vec<RegressionDraw> {
    let mut times_rng = tree.stream(&[u64::MAX]);
    let times = stratified_times(lo, hi, count, &mut times_rng);
    times
        .into_iter()
        .enumerate()
        .map(|(i, t)| RegressionDraw {
            t,
            noise: gaussian_vec(&mut tree.stream(&[i as u64]), dim),
        })
        .collect()
}

fn check_batch(batch: &[Vec<f64>], dim: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    for x in batch {
        if x.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: x.len(),
            });
        }
    }
    Ok(())
}

/// Per-element `(loss contribution, upstream-weighted backward)` reduced in
/// fixed chunks.
fn reduce_elements<F>(net: &DenoiserNet, count: usize, element: F) -> Result<(f64, GradientBuffer)>
where
    F: Fn(usize, &mut GradientBuffer) -> Result<f64> + Sync,
{
    let n_params = net.param_count();
    let chunks: Vec<(f64, GradientBuffer)> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grad = GradientBuffer::zeros(n_params);
            let mut total = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(count) {
                total += element(i, &mut grad)?;
            }
            Ok((total, grad))
        })
        .collect::<Result<_>>()?;
    let mut grad = GradientBuffer::zeros(n_params);
    let mut total = 0.0;
    for (v, g) in &chunks {
        total += v;
        grad.add_assign(g);
    }
    Ok((total, grad))
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Clean DSM residual `h(x_t, t) − x_0` with `x_t = α_t x_0 + σ_t η`.
pub fn dsm_residual<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &[f64],
    draw: &RegressionDraw,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x_t = schedule.forward_noise(x0, 0.0, draw.t, &draw.noise)?;
    let h = denoiser.denoise(&x_t, draw.t, schedule)?;
    let r = h.iter().zip(x0).map(|(a, b)| a - b).collect();
    Ok((x_t, r))
}

/// Ambient residual `c_h·h(x_t, t) + c_x·x_t − x_{t_n}` with `x_t` forward-noised
/// from the nature level.
pub fn ambient_residual<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_tn: &[f64],
    draw: &RegressionDraw,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x_t = schedule.forward_noise(x_tn, schedule.t_nature(), draw.t, &draw.noise)?;
    let c = schedule.target_coefficients(draw.t)?;
    let h = denoiser.denoise(&x_t, draw.t, schedule)?;
    let r = h
        .iter()
        .zip(&x_t)
        .zip(x_tn)
        .map(|((hi, xi), yi)| c.c_h * hi + c.c_x * xi - yi)
        .collect();
    Ok((x_t, r))
}

/// Clean DSM on caller-supplied draws.
pub fn dsm_on_draws(
    net: &DenoiserNet,
    batch: &[Vec<f64>],
    draws: &[RegressionDraw],
    schedule: &NoiseSchedule,
) -> Result<LossBatchReport> {
    check_batch(batch, net.dim())?;
    if draws.len() != batch.len() {
        return Err(Error::Dimension {
            expected: batch.len(),
            got: draws.len(),
        });
    }
    let n = batch.len() as f64;
    let (total, mut grad) = reduce_elements(net, batch.len(), |i, grad| {
        let draw = &draws[i];
        let x_t = schedule.forward_noise(&batch[i], 0.0, draw.t, &draw.noise)?;
        let h = net.forward(&x_t, draw.t, schedule)?;
        let r: Vec<f64> = h.iter().zip(&batch[i]).map(|(a, b)| a - b).collect();
        let up: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        net.accumulate_backward(&x_t, draw.t, schedule, &up, grad)?;
        Ok(squared_norm(&r))
    })?;
    grad.scale(1.0 / n);
    let loss = total / n;
    LossBatchReport {
        loss,
        grad,
        breakdown: LossBreakdown {
            ambient_dsm: loss,
            consistency: 0.0,
        },
        lambda: 0.0,
        count: batch.len(),
        times: draws.iter().map(|d| d.t).collect(),
    }
    .check()
}

/// Clean denoising score matching with `t ~ U[0, T]`. Needs clean samples.
pub fn dsm_loss(net: &DenoiserNet, batch: &[Vec<f64>], schedule: &NoiseSchedule, tree: &SeedTree) -> Result<LossBatchReport> {
    check_batch(batch, net.dim())?;
    let draws = regression_draws(&tree.child(&[tag::REGRESSION]), batch.len(), net.dim(), 0.0, schedule.t_max());
    dsm_on_draws(net, batch, &draws, schedule)
}

/// Ambient DSM on caller-supplied draws (all `t` must clear the bridge guard).
pub fn ambient_on_draws(
    net: &DenoiserNet,
    batch: &[Vec<f64>],
    draws: &[RegressionDraw],
    schedule: &NoiseSchedule,
) -> Result<LossBatchReport> {
    check_batch(batch, net.dim())?;
    if draws.len() != batch.len() {
        return Err(Error::Dimension {
            expected: batch.len(),
            got: draws.len(),
        });
    }
    let n = batch.len() as f64;
    let (total, mut grad) = reduce_elements(net, batch.len(), |i, grad| {
        let draw = &draws[i];
        let x_tn = &batch[i];
        let x_t = schedule.forward_noise(x_tn, schedule.t_nature(), draw.t, &draw.noise)?;
        let c = schedule.target_coefficients(draw.t)?;
        let h = net.forward(&x_t, draw.t, schedule)?;
        let r: Vec<f64> = h
            .iter()
            .zip(&x_t)
            .zip(x_tn)
            .map(|((hi, xi), yi)| c.c_h * hi + c.c_x * xi - yi)
            .collect();
        let up: Vec<f64> = r.iter().map(|v| 2.0 * c.c_h * v).collect();
        net.accumulate_backward(&x_t, draw.t, schedule, &up, grad)?;
        Ok(squared_norm(&r))
    })?;
    grad.scale(1.0 / n);
    let loss = total / n;
    LossBatchReport {
        loss,
        grad,
        breakdown: LossBreakdown {
            ambient_dsm: loss,
            consistency: 0.0,
        },
        lambda: 0.0,
        count: batch.len(),
        times: draws.iter().map(|d| d.t).collect(),
    }
    .check()
}

/// Draws for the ambient loss: `t` stratified on the admissible part of `(t_n, T]`.
pub fn ambient_draws(schedule: &NoiseSchedule, tree: &SeedTree, count: usize, dim: usize) -> Result<Vec<RegressionDraw>> {
    let lo = schedule.admissible_lower_time()?;
    Ok(regression_draws(&tree.child(&[tag::REGRESSION]), count, dim, lo, schedule.t_max()))
}

/// Ambient denoising score matching from nature-level samples only.
pub fn ambient_dsm_loss(net: &DenoiserNet, batch: &[Vec<f64>], schedule: &NoiseSchedule, tree: &SeedTree) -> Result<LossBatchReport> {
    check_batch(batch, net.dim())?;
    let draws = ambient_draws(schedule, tree, batch.len(), net.dim())?;
    ambient_on_draws(net, batch, &draws, schedule)
}

/// Inputs of one consistency estimate: `x_{t'}` at `t'` and two independent
/// one-step continuations to `t''`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyDraw {
    pub t: f64,
    pub t_prime: f64,
    pub t_second: f64,
    pub x_prime: Vec<f64>,
    pub h_prime: Vec<f64>,
    pub x_first: Vec<f64>,
    pub x_second: Vec<f64>,
}

/// Samples `t`, `x_t`, `t'`, `x_{t'}`, `t''` and the two transitions for one
/// element, using `denoiser` to drive the chain.
pub fn consistency_draw<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_tn: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
    cfg: &ConsistencyConfig,
    rng: &mut StreamRng,
) -> Result<ConsistencyDraw> {
    let dim = x_tn.len();
    let eta = gaussian_vec(rng, dim);
    let x_t = schedule.forward_noise(x_tn, schedule.t_nature(), t, &eta)?;
    let mut t_prime = cfg.eps + rng.gen::<f64>() * (t - cfg.eps);
    while t_prime <= cfg.eps {
        t_prime = cfg.eps + rng.gen::<f64>() * (t - cfg.eps);
    }
    let x_prime = if cfg.forward_above_nature && t_prime > schedule.t_nature() {
        let z = gaussian_vec(rng, dim);
        schedule.forward_noise(x_tn, schedule.t_nature(), t_prime, &z)?
    } else {
        run_chain(
            denoiser,
            &x_t,
            t,
            t_prime,
            cfg.chain_steps,
            SamplerKind::Stochastic,
            cfg.rho,
            schedule,
            rng,
        )
        .map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!("consistency chain: {context}")),
            other => other,
        })?
    };
    let lo = (t_prime - cfg.eps).max(0.0);
    let t_second = lo + rng.gen::<f64>() * (t_prime - lo);
    let h_prime = denoiser.denoise(&x_prime, t_prime, schedule)?;
    let z1 = gaussian_vec(rng, dim);
    let z2 = gaussian_vec(rng, dim);
    let x_first = stochastic_update(schedule, &x_prime, &h_prime, t_prime, t_second, &z1)?;
    let x_second = stochastic_update(schedule, &x_prime, &h_prime, t_prime, t_second, &z2)?;
    Ok(ConsistencyDraw {
        t,
        t_prime,
        t_second,
        x_prime,
        h_prime,
        x_first,
        x_second,
    })
}

/// `(h(x¹, t'') − h(x_{t'}, t'))ᵀ (h(x², t'') − h(x_{t'}, t'))`.
pub fn two_sample_estimate(h_prime: &[f64], h_first: &[f64], h_second: &[f64]) -> f64 {
    h_prime
        .iter()
        .zip(h_first)
        .zip(h_second)
        .map(|((c, a), b)| (a - c) * (b - c))
        .sum()
}

/// Lower end of the `t` range used by the consistency term.
fn consistency_lower_time(schedule: &NoiseSchedule, cfg: &ConsistencyConfig) -> f64 {
    // `t' ∈ (eps, t)` is empty unless `t > eps`.
    schedule.t_nature().max(cfg.eps)
}

/// Value-only consistency estimates for any denoiser, one per batch element.
pub fn consistency_estimates<D: Denoiser + ?Sized>(
    denoiser: &D,
    batch: &[Vec<f64>],
    schedule: &NoiseSchedule,
    cfg: &ConsistencyConfig,
    tree: &SeedTree,
) -> Result<Vec<f64>> {
    check_batch(batch, denoiser.dim())?;
    cfg.validate(schedule)?;
    let tree = tree.child(&[tag::CONSISTENCY]);
    let times = stratified_times(
        consistency_lower_time(schedule, cfg),
        schedule.t_max(),
        batch.len(),
        &mut tree.stream(&[u64::MAX]),
    );
    batch
        .par_iter()
        .zip(times.par_iter())
        .enumerate()
        .map(|(i, (x, t))| {
            let mut rng = tree.stream(&[i as u64]);
            let d = consistency_draw(denoiser, x, *t, schedule, cfg, &mut rng)?;
            let a = denoiser.denoise(&d.x_first, d.t_second, schedule)?;
            let b = denoiser.denoise(&d.x_second, d.t_second, schedule)?;
            Ok(two_sample_estimate(&d.h_prime, &a, &b))
        })
        .collect()
}

/// Consistency loss with gradients through the three denoiser evaluations
/// of the estimator; the chain that produced `x_{t'}` is not differentiated.
pub fn consistency_loss(
    net: &DenoiserNet,
    batch: &[Vec<f64>],
    schedule: &NoiseSchedule,
    cfg: &ConsistencyConfig,
    tree: &SeedTree,
) -> Result<LossBatchReport> {
    check_batch(batch, net.dim())?;
    cfg.validate(schedule)?;
    let tree = tree.child(&[tag::CONSISTENCY]);
    let times = stratified_times(
        consistency_lower_time(schedule, cfg),
        schedule.t_max(),
        batch.len(),
        &mut tree.stream(&[u64::MAX]),
    );
    let n = batch.len() as f64;
    let (total, mut grad) = reduce_elements(net, batch.len(), |i, grad| {
        let mut rng = tree.stream(&[i as u64]);
        let d = consistency_draw(net, &batch[i], times[i], schedule, cfg, &mut rng)?;
        let a = net.forward(&d.x_first, d.t_second, schedule)?;
        let b = net.forward(&d.x_second, d.t_second, schedule)?;
        let c = &d.h_prime;
        let up_a: Vec<f64> = b.iter().zip(c).map(|(b, c)| b - c).collect();
        let up_b: Vec<f64> = a.iter().zip(c).map(|(a, c)| a - c).collect();
        let up_c: Vec<f64> = up_a.iter().zip(&up_b).map(|(u, v)| -(u + v)).collect();
        net.accumulate_backward(&d.x_first, d.t_second, schedule, &up_a, grad)?;
        net.accumulate_backward(&d.x_second, d.t_second, schedule, &up_b, grad)?;
        net.accumulate_backward(&d.x_prime, d.t_prime, schedule, &up_c, grad)?;
        Ok(two_sample_estimate(c, &a, &b))
    })?;
    grad.scale(1.0 / n);
    let loss = total / n;
    LossBatchReport {
        loss,
        grad,
        breakdown: LossBreakdown {
            ambient_dsm: 0.0,
            consistency: loss,
        },
        lambda: 1.0,
        count: batch.len(),
        times,
    }
    .check()
}

/// Ambient DSM plus `lambda` times the consistency loss.
pub fn combined_loss(
    net: &DenoiserNet,
    batch: &[Vec<f64>],
    schedule: &NoiseSchedule,
    cfg: &ConsistencyConfig,
    tree: &SeedTree,
    lambda: f64,
) -> Result<LossBatchReport> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::config(format!("consistency weight must be ≥ 0, got {lambda}")));
    }
    let ambient = ambient_dsm_loss(net, batch, schedule, tree)?;
    if lambda == 0.0 {
        return Ok(ambient);
    }
    let cons = consistency_loss(net, batch, schedule, cfg, tree)?;
    let mut grad = ambient.grad;
    for (g, c) in grad.0.iter_mut().zip(&cons.grad.0) {
        *g += lambda * c;
    }
    let mut times = ambient.times;
    times.extend(cons.times);
    LossBatchReport {
        loss: ambient.loss + lambda * cons.loss,
        grad,
        breakdown: LossBreakdown {
            ambient_dsm: ambient.loss,
            consistency: cons.loss,
        },
        lambda,
        count: batch.len(),
        times,
    }
    .check()
}
