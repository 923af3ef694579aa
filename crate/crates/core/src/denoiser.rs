//! Anything that maps `(x_t, t)` to an estimate of `E[X_0 | X_t = x_t]`.

use crate::error::Result;
use crate::net::DenoiserNet;
use crate::oracle::GaussianMixture;
use crate::schedule::NoiseSchedule;

pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>>;

    /// Directional derivative of the denoiser in its input along `dx`.
    /// The default uses a central difference with a step scaled to the
    /// noise level.
    fn jvp(&self, x: &[f64], t: f64, schedule: &NoiseSchedule, dx: &[f64]) -> Result<Vec<f64>> {
        let delta = 1e-4 * schedule.sigma(t)?.max(1e-2);
        let plus: Vec<f64> = x.iter().zip(dx).map(|(a, d)| a + delta * d).collect();
        let minus: Vec<f64> = x.iter().zip(dx).map(|(a, d)| a - delta * d).collect();
        let hp = self.denoise(&plus, t, schedule)?;
        let hm = self.denoise(&minus, t, schedule)?;
        Ok(hp.iter().zip(&hm).map(|(p, m)| (p - m) / (2.0 * delta)).collect())
    }
}

impl Denoiser for DenoiserNet {
    fn dim(&self) -> usize {
        DenoiserNet::dim(self)
    }

    fn denoise(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.forward(x, t, schedule)
    }

    fn jvp(&self, x: &[f64], t: f64, schedule: &NoiseSchedule, dx: &[f64]) -> Result<Vec<f64>> {
        self.forward_jvp_through_input(x, t, schedule, dx)
    }
}

/// The exact posterior mean of a mixture prior.
impl Denoiser for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn denoise(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.posterior_mean(x, t, schedule)
    }
}

/// Adapts a closure; handy for constant or identity denoisers.
pub struct FnDenoiser<F> {
    dim: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x: &[f64], t: f64, _schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        Ok((self.f)(x, t))
    }
}
