//! Reverse-time generation.
//!
//! Both samplers step over a grid that is uniform in `σ^{1/ρ}` (default
//! `ρ = 2`) and work in VE coordinates: a VP state `x` is rescaled to
//! `x/α_t` with level `σ_t/α_t`, stepped, and scaled back by `α_{t_next}`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, tag, SeedTree};
use crate::schedule::{NoiseSchedule, ProcessKind};

pub const DEFAULT_GRID_RHO: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    /// Euler–Maruyama on the reverse SDE.
    Stochastic,
    /// DDIM.
    Deterministic,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Stochastic => "sde",
            SamplerKind::Deterministic => "ddim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sde" | "stochastic" => Ok(SamplerKind::Stochastic),
            "ddim" | "deterministic" => Ok(SamplerKind::Deterministic),
            other => Err(Error::config(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub kind: SamplerKind,
    /// `None` starts at the schedule's terminal time.
    pub t_start: Option<f64>,
    pub t_stop: f64,
    /// Replace the final state by `h(x, t_stop)`; used for early stopping.
    pub final_denoise: bool,
    pub rho: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 25,
            kind: SamplerKind::Stochastic,
            t_start: None,
            t_stop: 0.0,
            final_denoise: false,
            rho: DEFAULT_GRID_RHO,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(n_steps: usize, kind: SamplerKind) -> Self {
        Self {
            n_steps,
            kind,
            ..Self::default()
        }
    }

    /// Stops at the nature level and jumps to the denoised estimate there.
    pub fn early_stopped(mut self, schedule: &NoiseSchedule) -> Self {
        self.t_stop = schedule.t_nature();
        self.final_denoise = true;
        self
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("sampler needs at least one step"));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::config(format!("grid exponent must be positive, got {}", self.rho)));
        }
        let start = self.t_start.unwrap_or(schedule.t_max());
        if !(self.t_stop >= 0.0 && start > self.t_stop && start <= schedule.t_max()) {
            return Err(Error::config(format!(
                "sampler needs T ≥ t_start > t_stop ≥ 0, got t_start {start}, t_stop {}",
                self.t_stop
            )));
        }
        Ok(())
    }
}

/// `n + 1` decreasing levels from `sigma_start` to `sigma_stop`, uniform in `σ^{1/ρ}`.
pub fn sigma_grid(sigma_start: f64, sigma_stop: f64, n: usize, rho: f64) -> Vec<f64> {
    let a = sigma_start.powf(1.0 / rho);
    let b = sigma_stop.powf(1.0 / rho);
    let mut grid: Vec<f64> = (0..=n)
        .map(|i| (a + (i as f64 / n as f64) * (b - a)).powf(rho))
        .collect();
    grid[0] = sigma_start;
    grid[n] = sigma_stop;
    grid
}

/// Decreasing times from `t_start` to `t_stop` matching [`sigma_grid`].
pub fn time_grid(schedule: &NoiseSchedule, t_start: f64, t_stop: f64, n: usize, rho: f64) -> Result<Vec<f64>> {
    let grid = sigma_grid(schedule.sigma(t_start)?, schedule.sigma(t_stop)?, n, rho);
    let mut times = grid
        .iter()
        .map(|s| schedule.time_at_sigma(*s))
        .collect::<Result<Vec<_>>>()?;
    times[0] = t_start;
    times[n] = t_stop;
    Ok(times)
}

struct StepLevels {
    alpha: f64,
    alpha_next: f64,
    /// VE-equivalent levels `σ/α`.
    level: f64,
    level_next: f64,
}

fn step_levels(schedule: &NoiseSchedule, t: f64, t_next: f64) -> Result<StepLevels> {
    if !(t_next < t) {
        return Err(Error::domain(format!("reverse step needs t_next < t, got {t_next} ≥ {t}")));
    }
    let s = schedule.sigma(t)?;
    let s_next = schedule.sigma(t_next)?;
    if !(s_next < s) {
        return Err(Error::domain(format!("reverse step needs σ_next < σ_t, got {s_next} ≥ {s}")));
    }
    let alpha = schedule.alpha_of_sigma(s);
    let alpha_next = schedule.alpha_of_sigma(s_next);
    Ok(match schedule.kind() {
        ProcessKind::Ve => StepLevels {
            alpha,
            alpha_next,
            level: s,
            level_next: s_next,
        },
        ProcessKind::Vp => StepLevels {
            alpha,
            alpha_next,
            level: s / alpha,
            level_next: s_next / alpha_next,
        },
    })
}

/// Euler–Maruyama update from a precomputed denoiser value `h = h(x, t)`:
/// `x' = x + 2(σ − σ')(h − x)/σ + √(σ² − σ'²)·z` in VE coordinates.
pub fn stochastic_update(
    schedule: &NoiseSchedule,
    x: &[f64],
    h: &[f64],
    t: f64,
    t_next: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    let lv = step_levels(schedule, t, t_next)?;
    let drift = 2.0 * (lv.level - lv.level_next) / lv.level;
    let diffusion = (lv.level * lv.level - lv.level_next * lv.level_next).sqrt();
    Ok(x.iter()
        .zip(h)
        .zip(z)
        .map(|((xi, hi), zi)| {
            let xs = xi / lv.alpha;
            lv.alpha_next * (xs + drift * (hi - xs) + diffusion * zi)
        })
        .collect())
}

/// One Euler–Maruyama step with a caller-supplied standard normal draw `z`.
pub fn reverse_step_stochastic_with_noise<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    t: f64,
    t_next: f64,
    schedule: &NoiseSchedule,
    z: &[f64],
) -> Result<Vec<f64>> {
    step_levels(schedule, t, t_next)?;
    let h = denoiser.denoise(x, t, schedule)?;
    stochastic_update(schedule, x, &h, t, t_next, z)
}

pub fn reverse_step_stochastic<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    x: &[f64],
    t: f64,
    t_next: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let z = gaussian_vec(rng, x.len());
    reverse_step_stochastic_with_noise(denoiser, x, t, t_next, schedule, &z)
}

/// DDIM: `x' = α'·ĥ + σ'·(x − α ĥ)/σ`.
pub fn reverse_step_deterministic<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    t: f64,
    t_next: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let lv = step_levels(schedule, t, t_next)?;
    let h = denoiser.denoise(x, t, schedule)?;
    let ratio = lv.level_next / lv.level;
    Ok(x.iter()
        .zip(&h)
        .map(|(xi, hi)| {
            let xs = xi / lv.alpha;
            lv.alpha_next * (hi + ratio * (xs - hi))
        })
        .collect())
}

/// Runs the reverse chain from `(x, t_start)` down to `t_stop`.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    x: &[f64],
    t_start: f64,
    t_stop: f64,
    n_steps: usize,
    kind: SamplerKind,
    rho: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let times = time_grid(schedule, t_start, t_stop, n_steps, rho)?;
    let mut state = x.to_vec();
    for (step, w) in times.windows(2).enumerate() {
        state = match kind {
            SamplerKind::Stochastic => reverse_step_stochastic(denoiser, &state, w[0], w[1], schedule, rng)?,
            SamplerKind::Deterministic => reverse_step_deterministic(denoiser, &state, w[0], w[1], schedule)?,
        };
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("sampler state after step {step}")));
        }
    }
    Ok(state)
}

fn chain_from<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    x: &[f64],
    t_start: f64,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let out = run_chain(denoiser, x, t_start, cfg.t_stop, cfg.n_steps, cfg.kind, cfg.rho, schedule, rng)?;
    if cfg.final_denoise && cfg.t_stop > 0.0 {
        denoiser.denoise(&out, cfg.t_stop, schedule)
    } else {
        Ok(out)
    }
}

/// Draws `n` samples starting from `N(0, σ_T² I)` (VE) or `N(0, I)` (VP).
pub fn generate<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate(schedule)?;
    let t_start = cfg.t_start.unwrap_or(schedule.t_max());
    let init_std = match schedule.kind() {
        ProcessKind::Ve => schedule.sigma(t_start)?,
        ProcessKind::Vp => 1.0,
    };
    let tree = SeedTree::new(cfg.seed).child(&[tag::SAMPLE]);
    let dim = denoiser.dim();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree.stream(&[i as u64]);
            let x: Vec<f64> = gaussian_vec(&mut rng, dim).iter().map(|z| init_std * z).collect();
            chain_from(denoiser, &x, t_start, schedule, cfg, &mut rng).map_err(|e| match e {
                Error::NonFinite { context } => Error::non_finite(format!("trajectory {i}: {context}")),
                other => other,
            })
        })
        .collect()
}

/// One draw of `X_0` given `X_t = x_t` under the model.
pub fn posterior_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    x_t: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(t > 0.0 && t <= schedule.t_max()) {
        return Err(Error::domain(format!("posterior sampling needs t in (0, T], got {t}")));
    }
    if t <= cfg.t_stop {
        return Err(Error::domain(format!(
            "posterior sampling from t = {t} must start above t_stop = {}",
            cfg.t_stop
        )));
    }
    chain_from(denoiser, x_t, t, schedule, cfg, rng)
}
