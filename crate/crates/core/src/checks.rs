//! Closed-form identity checks on the standard mixtures.
//!
//! Three families, each on M1 (2-D standard normal), M2 and the 8-ring:
//! the bridge identity `E[X_0|x] = a·E[X_tn|x] + b·x` under VE and VP, the
//! score against a finite-difference gradient of `log p_t`, and the
//! generalized Tweedie formula `∇log p_t(x) = (k·E[X_tn|x] − x)/s²` where
//! `X_t = k X_tn + s Z`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::oracle::GaussianMixture;
use crate::rng::{gaussian_vec, SeedTree};
use crate::schedule::NoiseSchedule;

pub const BRIDGE_TOLERANCE: f64 = 1e-10;
pub const SCORE_TOLERANCE: f64 = 1e-6;
pub const BRIDGE_PROBES: usize = 100;
pub const SCORE_PROBES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn standard_mixtures() -> Vec<(&'static str, GaussianMixture)> {
    vec![
        ("m1", GaussianMixture::standard(2)),
        ("m2", GaussianMixture::two_point()),
        ("m3", GaussianMixture::ring8()),
    ]
}

pub fn standard_schedules() -> Result<Vec<(&'static str, NoiseSchedule)>> {
    Ok(vec![
        ("ve", NoiseSchedule::ve_identity(3.0, 0.5)?),
        ("vp", NoiseSchedule::vp_reference(500.0)?),
    ])
}

/// A probe `(x_t, t)` with `t` uniform above `t_n` and `x_t ~ p_t`.
fn probe<R: Rng + ?Sized>(gm: &GaussianMixture, s: &NoiseSchedule, rng: &mut R) -> Result<(Vec<f64>, f64)> {
    let lo = s.admissible_lower_time()?;
    let t = lo + (s.t_max() - lo) * rng.gen::<f64>();
    let x0 = gm.sample_one(rng);
    let z = gaussian_vec(rng, gm.dim());
    Ok((s.forward_noise(&x0, 0.0, t, &z)?, t))
}

pub fn bridge_check(name: &str, gm: &GaussianMixture, s: &NoiseSchedule, probes: usize, seed: u64) -> Result<IdentityCheck> {
    let mut rng = SeedTree::new(seed).stream(&[1]);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (x, t) = probe(gm, s, &mut rng)?;
        let br = s.bridge_coefficients(t)?;
        let nature = gm.nature_posterior_mean(&x, t, s)?;
        let via_bridge: Vec<f64> = nature.iter().zip(&x).map(|(m, xi)| br.a * m + br.b * xi).collect();
        worst = worst.max(rel_err(&via_bridge, &gm.posterior_mean(&x, t, s)?));
    }
    Ok(IdentityCheck {
        name: format!("bridge/{name}"),
        probes,
        max_rel_err: worst,
        tolerance: BRIDGE_TOLERANCE,
    })
}

fn fd_gradient(gm: &GaussianMixture, s: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let sigma = s.sigma(t)?;
    let alpha = s.alpha_of_sigma(sigma);
    let h = 1e-4 * (alpha * alpha + sigma * sigma).sqrt();
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            // Fourth-order central stencil.
            let mut p2 = x.to_vec();
            let mut m2 = x.to_vec();
            p2[i] += 2.0 * h;
            m2[i] -= 2.0 * h;
            let f = |v: &[f64]| gm.log_density_t(v, t, s);
            Ok((8.0 * (f(&p)? - f(&m)?) - (f(&p2)? - f(&m2)?)) / (12.0 * h))
        })
        .collect()
}

pub fn score_check(name: &str, gm: &GaussianMixture, s: &NoiseSchedule, probes: usize, seed: u64) -> Result<IdentityCheck> {
    let mut rng = SeedTree::new(seed).stream(&[2]);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (x, t) = probe(gm, s, &mut rng)?;
        let fd = fd_gradient(gm, s, &x, t)?;
        worst = worst.max(rel_err(&gm.score(&x, t, s)?, &fd));
    }
    Ok(IdentityCheck {
        name: format!("score/{name}"),
        probes,
        max_rel_err: worst,
        tolerance: SCORE_TOLERANCE,
    })
}

pub fn generalized_tweedie_check(name: &str, gm: &GaussianMixture, s: &NoiseSchedule, probes: usize, seed: u64) -> Result<IdentityCheck> {
    let mut rng = SeedTree::new(seed).stream(&[3]);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (x, t) = probe(gm, s, &mut rng)?;
        let (k, std) = s.transition(s.sigma_nature(), s.sigma(t)?);
        let nature = gm.nature_posterior_mean(&x, t, s)?;
        let score: Vec<f64> = nature.iter().zip(&x).map(|(m, xi)| (k * m - xi) / (std * std)).collect();
        worst = worst.max(rel_err(&score, &fd_gradient(gm, s, &x, t)?));
    }
    Ok(IdentityCheck {
        name: format!("generalized-tweedie/{name}"),
        probes,
        max_rel_err: worst,
        tolerance: SCORE_TOLERANCE,
    })
}

/// Every identity on every standard mixture and schedule.
pub fn identity_suite(seed: u64) -> Result<Vec<IdentityCheck>> {
    let mut out = Vec::new();
    for (sname, s) in standard_schedules()? {
        for (i, (mname, gm)) in standard_mixtures().into_iter().enumerate() {
            let name = format!("{sname}/{mname}");
            let seed = seed.wrapping_add(i as u64);
            out.push(bridge_check(&name, &gm, &s, BRIDGE_PROBES, seed)?);
            out.push(score_check(&name, &gm, &s, SCORE_PROBES, seed)?);
            out.push(generalized_tweedie_check(&name, &gm, &s, SCORE_PROBES, seed)?);
        }
    }
    Ok(out)
}
