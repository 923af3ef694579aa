//! Run configuration: flat `key=value` lines with dotted module prefixes.
//!
//! Every key has a default; unknown keys are rejected. Values are normalized
//! on entry, so `echo` is canonical. An empty value means "derive it"
//! (for example `schedule.t_max=` takes the last anchor time).

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::loss::{ConsistencyConfig, LossKind};
use crate::net::{Activation, Architecture};
use crate::oracle::GaussianMixture;
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::schedule::{NoiseSchedule, ProcessKind, SigmaForm};
use crate::trainer::{AdamConfig, EvalSettings, TrainConfig};

pub const SEED_ENV: &str = "ATW_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    OptFloat,
    Int,
    Bool,
    Word,
    Text,
    Floats,
    /// `a,b;c,d`
    Rows,
    /// `t:σ,t:σ`
    Pairs,
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str) -> Key {
    Key { name, kind, default }
}

const KEYS: &[Key] = &[
    key("schedule.kind", Kind::Word, "ve"),
    key("schedule.form", Kind::Word, "identity"),
    key("schedule.anchors", Kind::Pairs, ""),
    key("schedule.t_max", Kind::OptFloat, ""),
    key("schedule.t_n", Kind::Float, "0.5"),
    key("schedule.guard", Kind::Float, "1e-10"),
    key("mixture.preset", Kind::Word, "m2"),
    key("mixture.dim", Kind::Int, "1"),
    key("mixture.weights", Kind::Floats, ""),
    key("mixture.means", Kind::Rows, ""),
    key("mixture.variances", Kind::Rows, ""),
    key("net.hidden", Kind::Floats, "64,64"),
    key("net.embed_dim", Kind::Int, "16"),
    key("net.activation", Kind::Word, "silu"),
    key("net.seed", Kind::Int, "2"),
    key("loss.kind", Kind::Word, "ambient"),
    key("loss.lambda", Kind::Float, "0.01"),
    key("loss.eps", Kind::OptFloat, ""),
    key("loss.chain_steps", Kind::Int, "8"),
    key("loss.forward_above_tn", Kind::Bool, "false"),
    key("loss.rho", Kind::Float, "2"),
    key("sampler.kind", Kind::Word, "sde"),
    key("sampler.steps", Kind::Int, "25"),
    key("sampler.start_time", Kind::OptFloat, ""),
    key("sampler.stop_time", Kind::Float, "0"),
    key("sampler.final_denoise", Kind::Bool, "false"),
    key("sampler.rho", Kind::Float, "2"),
    key("sampler.n", Kind::Int, "10000"),
    key("sampler.seed", Kind::Int, "7"),
    key("train.dataset", Kind::Text, ""),
    key("train.dataset_count", Kind::Int, "50000"),
    key("train.dataset_seed", Kind::Int, "1"),
    key("train.batch_size", Kind::Int, "256"),
    key("train.phase1_steps", Kind::Int, "2000"),
    key("train.phase2_steps", Kind::Int, "0"),
    key("train.lr", Kind::Float, "0.001"),
    key("train.beta1", Kind::Float, "0.9"),
    key("train.beta2", Kind::Float, "0.999"),
    key("train.weight_decay", Kind::Float, "0.01"),
    key("train.epsilon", Kind::Float, "1e-8"),
    key("train.seed", Kind::Int, "3"),
    key("train.eval_every", Kind::Int, "0"),
    key("train.checkpoint_every", Kind::Int, "0"),
    key("eval.sigmas", Kind::Floats, "0.05,0.1,0.3,0.5,0.6,1,2,3"),
    key("eval.n_points", Kind::Int, "2000"),
    key("eval.seed", Kind::Int, "12345"),
    key("eval.projections", Kind::Int, "128"),
    key("eval.reference_n", Kind::Int, "10000"),
    key("eval.attack_sigma", Kind::Float, "1.5"),
    key("eval.attack_per_point", Kind::Int, "250"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn fmt_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn parse_float(name: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{name}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::config(format!("{name}: value must be finite")));
    }
    Ok(v)
}

fn parse_floats(name: &str, s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_float(name, p)).collect()
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| fmt_float(*x)).collect::<Vec<_>>().join(",")
}

fn normalize(k: &Key, raw: &str) -> Result<String> {
    let s = raw.trim();
    let name = k.name;
    Ok(match k.kind {
        Kind::Float => fmt_float(parse_float(name, s)?),
        Kind::OptFloat if s.is_empty() => String::new(),
        Kind::OptFloat => fmt_float(parse_float(name, s)?),
        Kind::Int => s
            .parse::<u64>()
            .map_err(|_| Error::config(format!("{name}: `{s}` is not a non-negative integer")))?
            .to_string(),
        Kind::Bool => match s {
            "true" | "1" | "yes" => "true".into(),
            "false" | "0" | "no" => "false".into(),
            _ => return Err(Error::config(format!("{name}: `{s}` is not a boolean"))),
        },
        Kind::Word => {
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::config(format!("{name}: expected a single word, got `{s}`")));
            }
            s.to_ascii_lowercase()
        }
        Kind::Text => s.to_string(),
        Kind::Floats => join_floats(&parse_floats(name, s)?),
        Kind::Rows => {
            if s.is_empty() {
                String::new()
            } else {
                s.split(';')
                    .map(|row| parse_floats(name, row).map(|r| join_floats(&r)))
                    .collect::<Result<Vec<_>>>()?
                    .join(";")
            }
        }
        Kind::Pairs => {
            if s.is_empty() {
                String::new()
            } else {
                s.split(',')
                    .map(|pair| {
                        let (t, v) = pair
                            .split_once(':')
                            .ok_or_else(|| Error::config(format!("{name}: `{pair}` is not t:σ")))?;
                        Ok(format!("{}:{}", fmt_float(parse_float(name, t)?), fmt_float(parse_float(name, v)?)))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .join(",")
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|k| (k.name, normalize(k, k.default).expect("defaults are well formed")))
            .collect();
        Self { values }
    }
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|k| k.name)
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = lookup(name).ok_or_else(|| Error::config(format!("unknown key `{name}`")))?;
        self.values.insert(k.name, normalize(k, value)?);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, name: &str) -> Result<&str> {
        self.values
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("unknown key `{name}`")))
    }

    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Reseeds every random source except evaluation draws, which stay fixed
    /// so reports remain comparable across a sweep.
    pub fn override_seed(&mut self, seed: u64) {
        let s = seed.to_string();
        for k in ["train.seed", "train.dataset_seed", "net.seed", "sampler.seed"] {
            self.values.insert(lookup(k).expect("seed key").name, s.clone());
        }
    }

    /// Honors `ATW_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}=`{raw}` is not an integer")))?;
            self.override_seed(seed);
        }
        Ok(())
    }

    /// Builds every typed section once so bad combinations surface early.
    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.mixture()?;
        self.sampler_config()?;
        LossKind::parse(self.get("loss.kind")?)?;
        Activation::parse(self.get("net.activation")?)?;
        Ok(())
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        parse_float(name, self.get(name)?)
    }

    pub fn opt_f64(&self, name: &str) -> Result<Option<f64>> {
        let s = self.get(name)?;
        if s.is_empty() {
            Ok(None)
        } else {
            parse_float(name, s).map(Some)
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.get(name)?
            .parse()
            .map_err(|_| Error::config(format!("{name} is not an integer")))
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        Ok(self.u64(name)? as usize)
    }

    pub fn bool(&self, name: &str) -> Result<bool> {
        Ok(self.get(name)? == "true")
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        parse_floats(name, self.get(name)?)
    }

    fn rows(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let s = self.get(name)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(';').map(|r| parse_floats(name, r)).collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let kind = ProcessKind::parse(self.get("schedule.kind")?)?;
        let form = match self.get("schedule.form")? {
            "identity" => SigmaForm::Identity,
            "vp-reference" | "paper-vp-anchors" => SigmaForm::vp_reference(),
            "anchors" => {
                let s = self.get("schedule.anchors")?;
                if s.is_empty() {
                    return Err(Error::config("schedule.form=anchors needs schedule.anchors"));
                }
                let pairs = s
                    .split(',')
                    .map(|p| {
                        let (t, v) = p.split_once(':').expect("normalized pair");
                        Ok((parse_float("schedule.anchors", t)?, parse_float("schedule.anchors", v)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                SigmaForm::Anchors(pairs)
            }
            other => return Err(Error::config(format!("unknown schedule form `{other}`"))),
        };
        let t_max = match (self.opt_f64("schedule.t_max")?, &form) {
            (Some(t), _) => t,
            (None, SigmaForm::Identity) => 3.0,
            (None, SigmaForm::Anchors(a)) => a.last().map_or(0.0, |p| p.0),
        };
        NoiseSchedule::new(kind, form, t_max, self.f64("schedule.t_n")?)?.with_guard(self.f64("schedule.guard")?)
    }

    /// `None` when `mixture.preset=none`.
    pub fn mixture(&self) -> Result<Option<GaussianMixture>> {
        let preset = self.get("mixture.preset")?;
        Ok(match preset {
            "none" => None,
            "m1" => Some(GaussianMixture::standard(self.usize("mixture.dim")?.max(1))),
            "custom" => {
                let weights = self.floats("mixture.weights")?;
                let means = self.rows("mixture.means")?;
                let variances = self.rows("mixture.variances")?;
                Some(GaussianMixture::new(weights, means, variances)?)
            }
            other => Some(GaussianMixture::preset(other)?),
        })
    }

    /// Data dimension: the mixture's, or `mixture.dim` without one.
    pub fn dim(&self) -> Result<usize> {
        Ok(match self.mixture()? {
            Some(m) => m.dim(),
            None => self.usize("mixture.dim")?,
        })
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let hidden = self
            .floats("net.hidden")?
            .into_iter()
            .map(|h| {
                if h.fract() == 0.0 && h >= 1.0 {
                    Ok(h as usize)
                } else {
                    Err(Error::config(format!("net.hidden: `{h}` is not a layer width")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Architecture::new(
            self.dim()?,
            hidden,
            self.usize("net.embed_dim")?,
            Activation::parse(self.get("net.activation")?)?,
        )
    }

    pub fn consistency(&self, schedule: &NoiseSchedule) -> Result<ConsistencyConfig> {
        let mut c = ConsistencyConfig::for_schedule(schedule);
        if let Some(eps) = self.opt_f64("loss.eps")? {
            c.eps = eps;
        }
        c.chain_steps = self.usize("loss.chain_steps")?;
        c.forward_above_nature = self.bool("loss.forward_above_tn")?;
        c.rho = self.f64("loss.rho")?;
        c.validate(schedule)?;
        Ok(c)
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        Ok(EvalSettings {
            sigmas: self.floats("eval.sigmas")?,
            n_points: self.usize("eval.n_points")?,
            seed: self.u64("eval.seed")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule = self.schedule()?;
        let dataset = self.get("train.dataset")?;
        let cfg = TrainConfig {
            consistency: self.consistency(&schedule)?,
            mixture: self.mixture()?,
            dataset_path: (!dataset.is_empty()).then(|| PathBuf::from(dataset)),
            dataset_count: self.usize("train.dataset_count")?,
            dataset_seed: self.u64("train.dataset_seed")?,
            architecture: self.architecture()?,
            net_seed: self.u64("net.seed")?,
            loss_kind: LossKind::parse(self.get("loss.kind")?)?,
            lambda: self.f64("loss.lambda")?,
            batch_size: self.usize("train.batch_size")?,
            phase1_steps: self.u64("train.phase1_steps")?,
            phase2_steps: self.u64("train.phase2_steps")?,
            learning_rate: self.f64("train.lr")?,
            adam: AdamConfig {
                beta1: self.f64("train.beta1")?,
                beta2: self.f64("train.beta2")?,
                epsilon: self.f64("train.epsilon")?,
                weight_decay: self.f64("train.weight_decay")?,
            },
            seed: self.u64("train.seed")?,
            eval_every: self.u64("train.eval_every")?,
            checkpoint_every: self.u64("train.checkpoint_every")?,
            eval: self.eval_settings()?,
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            n_steps: self.usize("sampler.steps")?,
            kind: SamplerKind::parse(self.get("sampler.kind")?)?,
            t_start: self.opt_f64("sampler.start_time")?,
            t_stop: self.f64("sampler.stop_time")?,
            final_denoise: self.bool("sampler.final_denoise")?,
            rho: self.f64("sampler.rho")?,
            seed: self.u64("sampler.seed")?,
        };
        cfg.validate(&self.schedule()?)?;
        Ok(cfg)
    }
}
