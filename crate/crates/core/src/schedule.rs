//! Noise schedules and the closed-form algebra that connects noise levels.
//!
//! A schedule maps time `t ∈ [0, T]` to a noise level `σ(t)` with `σ(0) = 0`.
//! Under the variance-exploding (VE) process `X_t = X_0 + σ_t Z`; under the
//! variance-preserving (VP) process `X_t = α_t X_0 + σ_t Z` with
//! `α_t = √(1 − σ_t²)`. Training data lives at the fixed nature time `t_n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower bound on `σ_t² − σ_{t_n}²` for bridge and target coefficients.
pub const DEFAULT_BRIDGE_GUARD: f64 = 1e-10;

/// Piecewise-linear anchors `(t, σ)` reproducing the four published VP levels.
pub const VP_REFERENCE_ANCHORS: [(f64, f64); 5] = [
    (0.0, 0.0),
    (100.0, 0.325),
    (500.0, 0.850),
    (800.0, 0.981),
    (1000.0, 0.9999),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessKind {
    Ve,
    Vp,
}

impl ProcessKind {
    pub fn name(self) -> &'static str {
        match self {
            ProcessKind::Ve => "ve",
            ProcessKind::Vp => "vp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ve" => Ok(ProcessKind::Ve),
            "vp" => Ok(ProcessKind::Vp),
            other => Err(Error::config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SigmaForm {
    /// `σ(t) = t`.
    Identity,
    /// Piecewise-linear interpolation through `(t, σ)` anchors.
    Anchors(Vec<(f64, f64)>),
}

impl SigmaForm {
    pub fn vp_reference() -> Self {
        SigmaForm::Anchors(VP_REFERENCE_ANCHORS.to_vec())
    }
}

/// Coefficients `(a, b)` with `E[X_0 | x_t] = a·E[X_{t_n} | x_t] + b·x_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bridge {
    pub a: f64,
    pub b: f64,
}

/// Coefficients of the ambient regression target:
/// `c_h·h(x_t, t) + c_x·x_t` estimates `E[X_{t_n} | x_t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetCoeffs {
    pub c_h: f64,
    pub c_x: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ProcessKind,
    form: SigmaForm,
    t_max: f64,
    t_nature: f64,
    guard: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ProcessKind, form: SigmaForm, t_max: f64, t_nature: f64) -> Result<Self> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::config(format!("terminal time must be positive, got {t_max}")));
        }
        if !(t_nature > 0.0 && t_nature < t_max) {
            return Err(Error::config(format!(
                "nature time must lie in (0, {t_max}), got {t_nature}"
            )));
        }
        if let SigmaForm::Anchors(anchors) = &form {
            validate_anchors(anchors, t_max)?;
        }
        let schedule = Self {
            kind,
            form,
            t_max,
            t_nature,
            guard: DEFAULT_BRIDGE_GUARD,
        };
        if kind == ProcessKind::Vp {
            let top = schedule.sigma_unchecked(t_max);
            if top >= 1.0 {
                return Err(Error::config(format!(
                    "VP schedule needs σ(T) < 1, got {top}"
                )));
            }
        }
        Ok(schedule)
    }

    /// VE process with `σ(t) = t`.
    pub fn ve_identity(t_max: f64, t_nature: f64) -> Result<Self> {
        Self::new(ProcessKind::Ve, SigmaForm::Identity, t_max, t_nature)
    }

    /// VP process on `[0, 1000]` through the reference anchors.
    pub fn vp_reference(t_nature: f64) -> Result<Self> {
        Self::new(ProcessKind::Vp, SigmaForm::vp_reference(), 1000.0, t_nature)
    }

    pub fn with_guard(mut self, guard: f64) -> Result<Self> {
        if !(guard.is_finite() && guard >= 0.0) {
            return Err(Error::config(format!("bridge guard must be ≥ 0, got {guard}")));
        }
        self.guard = guard;
        Ok(self)
    }

    /// Same process and form with a different nature time.
    pub fn with_nature_time(&self, t_nature: f64) -> Result<Self> {
        Self::new(self.kind, self.form.clone(), self.t_max, t_nature)?.with_guard(self.guard)
    }

    pub fn kind(&self) -> ProcessKind {
        self.kind
    }

    pub fn form(&self) -> &SigmaForm {
        &self.form
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn t_nature(&self) -> f64 {
        self.t_nature
    }

    pub fn guard(&self) -> f64 {
        self.guard
    }

    pub fn sigma_nature(&self) -> f64 {
        self.sigma_unchecked(self.t_nature)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_unchecked(self.t_max)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t.is_nan() || t < 0.0 || t > self.t_max {
            return Err(Error::domain(format!("time {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }

    fn sigma_unchecked(&self, t: f64) -> f64 {
        match &self.form {
            SigmaForm::Identity => t,
            SigmaForm::Anchors(anchors) => interpolate(anchors, t, |p| p.0, |p| p.1),
        }
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.sigma_unchecked(t))
    }

    /// Signal scale `α_t`: 1 for VE, `√(1 − σ_t²)` for VP.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        let sigma = self.sigma(t)?;
        Ok(self.alpha_of_sigma(sigma))
    }

    pub fn alpha_of_sigma(&self, sigma: f64) -> f64 {
        match self.kind {
            ProcessKind::Ve => 1.0,
            ProcessKind::Vp => (1.0 - sigma * sigma).max(0.0).sqrt(),
        }
    }

    /// Inverse of `σ(t)` on `[0, σ(T)]`.
    pub fn time_at_sigma(&self, sigma: f64) -> Result<f64> {
        let top = self.sigma_max();
        if sigma.is_nan() || sigma < 0.0 || sigma > top * (1.0 + 1e-15) {
            return Err(Error::domain(format!("σ = {sigma} outside [0, {top}]")));
        }
        let sigma = sigma.min(top);
        Ok(match &self.form {
            SigmaForm::Identity => sigma,
            SigmaForm::Anchors(anchors) => interpolate(anchors, sigma, |p| p.1, |p| p.0),
        })
    }

    /// Noises `x_src` observed at `t_src` further to `t_dst ≥ t_src`.
    pub fn forward_noise(&self, x_src: &[f64], t_src: f64, t_dst: f64, noise: &[f64]) -> Result<Vec<f64>> {
        let mut out = x_src.to_vec();
        self.forward_noise_into(&mut out, t_src, t_dst, noise)?;
        Ok(out)
    }

    pub fn forward_noise_into(&self, x: &mut [f64], t_src: f64, t_dst: f64, noise: &[f64]) -> Result<()> {
        if noise.len() != x.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                got: noise.len(),
            });
        }
        if t_dst < t_src {
            return Err(Error::domain(format!(
                "cannot denoise by forward noising: t_dst {t_dst} < t_src {t_src}"
            )));
        }
        let s_src = self.sigma(t_src)?;
        let s_dst = self.sigma(t_dst)?;
        let (scale, std) = self.transition(s_src, s_dst);
        for (xi, zi) in x.iter_mut().zip(noise) {
            *xi = scale * *xi + std * zi;
        }
        Ok(())
    }

    /// `(scale, std)` of the Gaussian transition from level `s_src` to `s_dst`.
    pub fn transition(&self, s_src: f64, s_dst: f64) -> (f64, f64) {
        let added = (s_dst * s_dst - s_src * s_src).max(0.0);
        match self.kind {
            ProcessKind::Ve => (1.0, added.sqrt()),
            ProcessKind::Vp => {
                let keep = 1.0 - s_src * s_src;
                (((1.0 - s_dst * s_dst) / keep).sqrt(), (added / keep).sqrt())
            }
        }
    }

    fn bridge_levels(&self, t: f64) -> Result<(f64, f64)> {
        let s = self.sigma(t)?;
        if t <= self.t_nature {
            return Err(Error::domain(format!(
                "bridge undefined at t = {t} ≤ t_n = {}",
                self.t_nature
            )));
        }
        let sn = self.sigma_nature();
        let gap = s * s - sn * sn;
        if gap < self.guard {
            return Err(Error::domain(format!(
                "σ_t² − σ_tn² = {gap:e} below guard {:e}",
                self.guard
            )));
        }
        Ok((s, sn))
    }

    pub fn bridge_coefficients(&self, t: f64) -> Result<Bridge> {
        let (s, sn) = self.bridge_levels(t)?;
        let (s2, sn2) = (s * s, sn * sn);
        let gap = s2 - sn2;
        Ok(match self.kind {
            ProcessKind::Ve => Bridge {
                a: s2 / gap,
                b: -sn2 / gap,
            },
            ProcessKind::Vp => Bridge {
                a: s2 * (1.0 - sn2).sqrt() / gap,
                b: -sn2 * (1.0 - s2).sqrt() / gap,
            },
        })
    }

    pub fn target_coefficients(&self, t: f64) -> Result<TargetCoeffs> {
        let (s, sn) = self.bridge_levels(t)?;
        let (s2, sn2) = (s * s, sn * sn);
        let gap = s2 - sn2;
        Ok(match self.kind {
            ProcessKind::Ve => TargetCoeffs {
                c_h: gap / s2,
                c_x: sn2 / s2,
            },
            ProcessKind::Vp => TargetCoeffs {
                c_h: gap / (s2 * (1.0 - sn2).sqrt()),
                c_x: (sn2 / s2) * ((1.0 - s2) / (1.0 - sn2)).sqrt(),
            },
        })
    }

    /// Smallest time above `t_n` whose level clears the bridge guard.
    pub fn admissible_lower_time(&self) -> Result<f64> {
        let sn = self.sigma_nature();
        let level = (sn * sn + self.guard).sqrt();
        if level >= self.sigma_max() {
            return Err(Error::domain(
                "no admissible time above t_n clears the bridge guard",
            ));
        }
        let t = self.time_at_sigma(level)?.max(self.t_nature);
        Ok(t)
    }
}

fn validate_anchors(anchors: &[(f64, f64)], t_max: f64) -> Result<()> {
    if anchors.len() < 2 {
        return Err(Error::config("anchor list needs at least two points"));
    }
    if anchors[0] != (0.0, 0.0) {
        return Err(Error::config("first anchor must be (0, 0)"));
    }
    for w in anchors.windows(2) {
        let ((t0, s0), (t1, s1)) = (w[0], w[1]);
        if !(t1 > t0 && s1 > s0) || !t1.is_finite() || !s1.is_finite() {
            return Err(Error::config(format!(
                "anchors must be strictly increasing in t and σ: ({t0}, {s0}) → ({t1}, {s1})"
            )));
        }
    }
    let last = anchors[anchors.len() - 1].0;
    if (last - t_max).abs() > 1e-12 * t_max.max(1.0) {
        return Err(Error::config(format!(
            "last anchor time {last} must equal terminal time {t_max}"
        )));
    }
    Ok(())
}

fn interpolate(
    anchors: &[(f64, f64)],
    x: f64,
    key: impl Fn(&(f64, f64)) -> f64,
    val: impl Fn(&(f64, f64)) -> f64,
) -> f64 {
    let idx = anchors.partition_point(|p| key(p) <= x);
    if idx == 0 {
        return val(&anchors[0]);
    }
    if idx >= anchors.len() {
        return val(&anchors[anchors.len() - 1]);
    }
    let (lo, hi) = (&anchors[idx - 1], &anchors[idx]);
    let w = (x - key(lo)) / (key(hi) - key(lo));
    val(lo) + w * (val(hi) - val(lo))
}
