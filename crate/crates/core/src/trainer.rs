//! Two-phase training.
//!
//! Phase 1 minimizes the ambient objective (or clean DSM for the baseline).
//! Phase 2 starts from the phase-1 parameters and adds `λ` times the
//! consistency loss. Every step draws its batch and noise from
//! `SeedTree(seed).child([TRAIN, step])`, so a run resumed from a checkpoint
//! at step `k` continues bit-for-bit.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{denoiser_mse_grid, DenoiserMseReport};
use crate::io::checkpoint::Checkpoint;
use crate::io::dataset::load_dataset;
use crate::loss::{ambient_dsm_loss, combined_loss, dsm_loss, ConsistencyConfig, LossBatchReport, LossKind};
use crate::net::{Architecture, DenoiserNet, GradientBuffer};
use crate::oracle::{GaussianMixture, NoisyDataset};
use crate::rng::{tag, SeedTree};
use crate::schedule::NoiseSchedule;

/// Losses above this (or non-finite) abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adam_step(params: &mut [f64], grads: &GradientBuffer, state: &mut OptimizerState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            got: grads.len(),
        });
    }
    grads.check_finite()?;
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powf(state.step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(state.step as f64);
    for (((p, g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * cfg.weight_decay * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub sigmas: Vec<f64>,
    pub n_points: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sigmas: vec![0.05, 0.1, 0.3, 0.5, 0.6, 1.0, 2.0, 3.0],
            n_points: 2000,
            seed: 12345,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: NoiseSchedule,
    /// Prior used to synthesize data and to score against the oracle.
    pub mixture: Option<GaussianMixture>,
    /// Noisy dataset on disk; takes precedence over synthesizing one.
    pub dataset_path: Option<PathBuf>,
    pub dataset_count: usize,
    pub dataset_seed: u64,
    pub architecture: Architecture,
    pub net_seed: u64,
    pub loss_kind: LossKind,
    pub consistency: ConsistencyConfig,
    pub lambda: f64,
    pub batch_size: usize,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub eval: EvalSettings,
}

impl TrainConfig {
    /// Desk-scale defaults for a schedule and an optional mixture.
    pub fn desk_defaults(schedule: NoiseSchedule, mixture: Option<GaussianMixture>) -> Self {
        let dim = mixture.as_ref().map_or(1, |m| m.dim());
        let consistency = ConsistencyConfig::for_schedule(&schedule);
        Self {
            schedule,
            mixture,
            dataset_path: None,
            dataset_count: 50_000,
            dataset_seed: 1,
            architecture: Architecture::new(dim, vec![64, 64], 16, crate::net::Activation::Silu)
                .expect("valid default architecture"),
            net_seed: 2,
            loss_kind: LossKind::Ambient,
            consistency,
            lambda: 0.01,
            batch_size: 256,
            phase1_steps: 2000,
            phase2_steps: 0,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            seed: 3,
            eval_every: 0,
            checkpoint_every: 0,
            eval: EvalSettings::default(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase1_steps == 0 && self.phase2_steps == 0 {
            return Err(Error::config("phase1_steps and phase2_steps cannot both be 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda must be ≥ 0"));
        }
        if self.loss_kind == LossKind::Dsm && self.phase2_steps > 0 {
            return Err(Error::config("clean DSM training has no consistency phase"));
        }
        if let Some(m) = &self.mixture {
            if m.dim() != self.architecture.dim {
                return Err(Error::Dimension {
                    expected: self.architecture.dim,
                    got: m.dim(),
                });
            }
        }
        self.consistency.validate(&self.schedule)
    }

    fn phase_loss(&self, step: u64) -> (LossKind, f64) {
        if step < self.phase1_steps {
            match self.loss_kind {
                LossKind::Dsm => (LossKind::Dsm, 0.0),
                _ => (LossKind::Ambient, 0.0),
            }
        } else {
            match self.loss_kind {
                LossKind::AmbientConsistency => (LossKind::AmbientConsistency, self.lambda),
                other => (other, 0.0),
            }
        }
    }
}

/// What the trainer fits.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainData {
    /// Nature-level observations; the ambient objectives.
    Noisy(NoisyDataset),
    /// Clean samples; only for the clean DSM baseline.
    Clean(Vec<Vec<f64>>),
}

impl TrainData {
    fn samples(&self) -> &[Vec<f64>] {
        match self {
            TrainData::Noisy(d) => &d.samples,
            TrainData::Clean(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub ambient_term: f64,
    pub consistency_term: f64,
    pub oracle_mse_by_sigma: Vec<(f64, f64)>,
}

pub enum TrainEvent<'a> {
    Metrics(&'a MetricsRecord),
    Checkpoint(&'a Checkpoint),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricsRecord>,
}

/// Walks the dataset stream: each element draws `X_0` and then its noise.
fn dataset_stream(mixture: &GaussianMixture, n: usize, seed: u64, mut each: impl FnMut(Vec<f64>, Vec<f64>) -> Result<()>) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("dataset size"));
    }
    let mut rng = SeedTree::new(seed).stream(&[tag::DATASET]);
    for _ in 0..n {
        let x0 = mixture.sample_one(&mut rng);
        let z = crate::rng::gaussian_vec(&mut rng, mixture.dim());
        each(x0, z)?;
    }
    Ok(())
}

/// Draws X_0 ~ p_0 and noises it to the nature level; only the noisy
/// samples are returned.
pub fn make_dataset(mixture: &GaussianMixture, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<NoisyDataset> {
    let mut samples = Vec::with_capacity(n);
    dataset_stream(mixture, n, seed, |x0, z| {
        samples.push(schedule.forward_noise(&x0, 0.0, schedule.t_nature(), &z)?);
        Ok(())
    })?;
    NoisyDataset::new(schedule.clone(), seed, samples)
}

/// The clean samples behind `make_dataset` with the same seed; for the
/// clean-data baseline only.
pub fn make_clean_dataset(mixture: &GaussianMixture, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut samples = Vec::with_capacity(n);
    dataset_stream(mixture, n, seed, |x0, _| {
        samples.push(x0);
        Ok(())
    })?;
    Ok(samples)
}

/// Resolves the configured data source.
pub fn resolve_data(cfg: &TrainConfig) -> Result<TrainData> {
    if let Some(path) = &cfg.dataset_path {
        let ds = load_dataset(path)?;
        return Ok(match cfg.loss_kind {
            LossKind::Dsm => TrainData::Clean(ds.samples),
            _ => TrainData::Noisy(ds),
        });
    }
    let mixture = cfg
        .mixture
        .as_ref()
        .ok_or_else(|| Error::config("training needs a mixture or a dataset path"))?;
    Ok(match cfg.loss_kind {
        LossKind::Dsm => TrainData::Clean(make_clean_dataset(mixture, cfg.dataset_count, cfg.dataset_seed)?),
        _ => TrainData::Noisy(make_dataset(mixture, &cfg.schedule, cfg.dataset_count, cfg.dataset_seed)?),
    })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = resolve_data(cfg)?;
    train_on(cfg, &data, &mut |_| Ok(()))
}

pub fn train_on(cfg: &TrainConfig, data: &TrainData, observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = DenoiserNet::init(cfg.architecture.clone(), cfg.net_seed);
    let start = Checkpoint::fresh(cfg.clone(), net);
    resume_on(start, data, observer)
}

/// Continues a run from `checkpoint` to the configured total step count.
pub fn resume_on(checkpoint: Checkpoint, data: &TrainData, observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>) -> Result<TrainOutcome> {
    let cfg = checkpoint.config.clone();
    cfg.validate()?;
    let samples = data.samples();
    if samples.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if samples[0].len() != cfg.architecture.dim {
        return Err(Error::Dimension {
            expected: cfg.architecture.dim,
            got: samples[0].len(),
        });
    }
    if matches!(data, TrainData::Clean(_)) != (cfg.loss_kind == LossKind::Dsm) {
        return Err(Error::config("clean data is used by, and only by, the dsm loss"));
    }
    let mut net = checkpoint.net()?;
    let mut opt = checkpoint.optimizer.clone();
    let mut step = checkpoint.step;
    let root = SeedTree::new(cfg.seed);
    let mut losses = Vec::new();
    let mut metrics = Vec::new();
    let mut last_good = checkpoint;

    while step < cfg.total_steps() {
        let tree = root.child(&[tag::TRAIN, step]);
        let mut batch_rng = tree.stream(&[tag::BATCH]);
        let batch: Vec<Vec<f64>> = (0..cfg.batch_size)
            .map(|_| samples[batch_rng.gen_range(0..samples.len())].clone())
            .collect();
        let (kind, lambda) = cfg.phase_loss(step);
        let result = match kind {
            LossKind::Dsm => dsm_loss(&net, &batch, &cfg.schedule, &tree),
            LossKind::Ambient => ambient_dsm_loss(&net, &batch, &cfg.schedule, &tree),
            LossKind::AmbientConsistency => combined_loss(&net, &batch, &cfg.schedule, &cfg.consistency, &tree, lambda),
        };
        let report: LossBatchReport = match result {
            Ok(r) if r.loss <= DIVERGENCE_THRESHOLD => r,
            Ok(r) => {
                return Err(Error::Diverged {
                    step,
                    loss: r.loss,
                    last_good: Box::new(last_good),
                })
            }
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                    last_good: Box::new(last_good),
                })
            }
            Err(e) => return Err(e),
        };
        adam_step(net.params_mut(), &report.grad, &mut opt, cfg.learning_rate, &cfg.adam)?;
        step += 1;
        losses.push(report.loss);

        let snapshot = Checkpoint {
            config: cfg.clone(),
            architecture: cfg.architecture.clone(),
            params: net.params().to_vec(),
            optimizer: opt.clone(),
            step,
        };
        if cfg.eval_every > 0 && (step.is_multiple_of(cfg.eval_every) || step == cfg.total_steps()) {
            let oracle = match &cfg.mixture {
                Some(m) => eval_grid(&net, m, &cfg)?
                    .rows
                    .iter()
                    .map(|r| (r.sigma_eval, r.relative_mse))
                    .collect(),
                None => Vec::new(),
            };
            let record = MetricsRecord {
                step,
                loss: report.loss,
                ambient_term: report.breakdown.ambient_dsm,
                consistency_term: report.breakdown.consistency,
                oracle_mse_by_sigma: oracle,
            };
            observer(TrainEvent::Metrics(&record))?;
            metrics.push(record);
        }
        if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
            observer(TrainEvent::Checkpoint(&snapshot))?;
        }
        last_good = snapshot;
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        losses,
        metrics,
    })
}

fn eval_grid(net: &DenoiserNet, mixture: &GaussianMixture, cfg: &TrainConfig) -> Result<DenoiserMseReport> {
    let top = cfg.schedule.sigma_max();
    let sigmas: Vec<f64> = cfg.eval.sigmas.iter().copied().filter(|s| *s > 0.0 && *s <= top).collect();
    denoiser_mse_grid(net, mixture, &cfg.schedule, &sigmas, cfg.eval.n_points, cfg.eval.seed)
}
