//! The `atw` command line.
//!
//! Every subcommand reads `--config <path>` (optional; defaults apply),
//! then `--set key=value` overrides, then `ATW_SEED`, then its own flags.
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 a failed
//! `oracle-check`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use atw_core::checks::identity_suite;
use atw_core::eval::{denoiser_mse_grid, memorization_attack, sliced_wasserstein2, AttackConfig};
use atw_core::io::report::{append_json_line, mse_csv, similarity_csv, to_json_line};
use atw_core::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, RunConfig};
use atw_core::loss::LossKind;
use atw_core::oracle::NoisyDataset;
use atw_core::rng::{tag, SeedTree};
use atw_core::sampler::{generate, SamplerKind};
use atw_core::trainer::{make_dataset, resolve_data, resume_on, train_on, TrainEvent};
use atw_core::{Checkpoint, Error, GaussianMixture, NoiseSchedule};
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "atw", version, about = "Train and evaluate diffusion models from noisy data")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run-config file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a noisy dataset from the configured mixture.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the two-phase training regimen.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Append metrics records (one JSON object per line).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop at the first checkpoint at or past this step, leaving a resumable file.
        #[arg(long)]
        stop_after: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate samples with a trained model or the mixture oracle.
    Sample {
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Drive the sampler with the exact posterior mean of the mixture.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        stop_time: Option<f64>,
        /// Stop at the nature time and return the denoised state there.
        #[arg(long)]
        early_stop: bool,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Denoiser error against the oracle on a σ grid.
    EvalDenoiser {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sliced Wasserstein-2 between a sample file and a reference.
    EvalDist {
        #[arg(long)]
        samples: PathBuf,
        /// Reference sample file; fresh mixture draws when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        projections: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Memorization attack: noise each point heavily and posterior-sample it.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file holding the points to attack.
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        per_point: Option<usize>,
        /// Noise level of the training data; read from the checkpoint by default.
        #[arg(long)]
        train_sigma: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Check the closed-form identities on the standard mixtures.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Print the fully resolved configuration.
    ConfigEcho {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> atw_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(path: Option<&Path>, text: &str) -> atw_core::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn mixture_for(cfg: &RunConfig, ck: Option<&Checkpoint>) -> atw_core::Result<GaussianMixture> {
    if let Some(m) = ck.and_then(|c| c.config.mixture.clone()) {
        return Ok(m);
    }
    cfg.mixture()?
        .ok_or_else(|| Error::Config("this command needs a mixture (mixture.preset)".into()))
}

fn make_dataset_cmd(cfg: &RunConfig, out: &Path, n: Option<usize>, seed: Option<u64>) -> atw_core::Result<()> {
    let schedule = cfg.schedule()?;
    let mixture = mixture_for(cfg, None)?;
    let n = n.unwrap_or(cfg.usize("train.dataset_count")?);
    let seed = seed.unwrap_or(cfg.u64("train.dataset_seed")?);
    let ds = make_dataset(&mixture, &schedule, n, seed)?;
    save_dataset(out, &ds)?;
    println!("wrote {} samples (dim {}, σ_tn {}) to {}", ds.count(), ds.dim(), schedule.sigma_nature(), out.display());
    Ok(())
}

fn train_cmd(
    cfg: &RunConfig,
    out: &Path,
    metrics: Option<&Path>,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> atw_core::Result<()> {
    let start = match resume {
        Some(p) => load_checkpoint(p)?,
        None => {
            let tc = cfg.train_config()?;
            let net = atw_core::DenoiserNet::init(tc.architecture.clone(), tc.net_seed);
            Checkpoint::fresh(tc, net)
        }
    };
    let data = resolve_data(&start.config)?;
    let mut stopped_at = None;
    let mut observer = |event: TrainEvent<'_>| -> atw_core::Result<()> {
        match event {
            TrainEvent::Metrics(m) => {
                if let Some(p) = metrics {
                    append_json_line(p, m)?;
                }
            }
            TrainEvent::Checkpoint(c) => {
                save_checkpoint(out, c)?;
                if stop_after.is_some_and(|s| c.step >= s) {
                    stopped_at = Some(c.step);
                    return Err(Error::Domain("stop requested".into()));
                }
            }
        }
        Ok(())
    };
    let result = if start.step == 0 && resume.is_none() {
        train_on(&start.config, &data, &mut observer)
    } else {
        resume_on(start, &data, &mut observer)
    };
    match result {
        Ok(outcome) => {
            save_checkpoint(out, &outcome.checkpoint)?;
            let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
            println!("trained to step {} (last loss {last}); checkpoint {}", outcome.checkpoint.step, out.display());
            Ok(())
        }
        Err(Error::Diverged { step, loss, last_good }) => {
            save_checkpoint(out, &last_good)?;
            Err(Error::Diverged { step, loss, last_good })
        }
        Err(_) if stopped_at.is_some() => {
            println!("stopped at step {}; checkpoint {}", stopped_at.unwrap_or(0), out.display());
            Ok(())
        }
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    cfg: &mut RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    sampler: Option<&str>,
    stop_time: Option<f64>,
    early_stop: bool,
    n: Option<usize>,
    seed: Option<u64>,
) -> atw_core::Result<()> {
    if let Some(v) = steps {
        cfg.set("sampler.steps", &v.to_string())?;
    }
    if let Some(v) = sampler {
        cfg.set("sampler.kind", SamplerKind::parse(v)?.name())?;
    }
    if let Some(v) = stop_time {
        cfg.set("sampler.stop_time", &v.to_string())?;
    }
    if let Some(v) = seed {
        cfg.set("sampler.seed", &v.to_string())?;
    }
    let n = n.unwrap_or(cfg.usize("sampler.n")?);
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let schedule = match &ck {
        Some(c) => c.config.schedule.clone(),
        None => cfg.schedule()?,
    };
    let mut sc = cfg.sampler_config()?;
    if early_stop {
        sc = sc.early_stopped(&schedule);
    }
    let samples = match &ck {
        Some(c) => generate(&c.net()?, &schedule, &sc, n)?,
        None => generate(&mixture_for(cfg, None)?, &schedule, &sc, n)?,
    };
    save_dataset(out, &NoisyDataset::new(schedule, sc.seed, samples)?)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn eval_denoiser_cmd(cfg: &RunConfig, checkpoint: &Path, csv: Option<&Path>, json: Option<&Path>) -> atw_core::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mixture = mixture_for(cfg, Some(&ck))?;
    let net = ck.net()?;
    let schedule = &ck.config.schedule;
    let ev = cfg.eval_settings()?;
    let report = denoiser_mse_grid(&net, &mixture, schedule, &ev.sigmas, ev.n_points, ev.seed)?
        .with_ids(checkpoint.display().to_string(), cfg.get("mixture.preset")?);
    if let Some(p) = json {
        append_json_line(p, &report)?;
    }
    write_or_print(csv, &mse_csv(&report))
}

fn eval_dist_cmd(cfg: &RunConfig, samples: &Path, reference: Option<&Path>, projections: Option<usize>) -> atw_core::Result<()> {
    let a = load_dataset(samples)?.samples;
    let b = match reference {
        Some(p) => load_dataset(p)?.samples,
        None => {
            let mixture = mixture_for(cfg, None)?;
            let mut rng = SeedTree::new(cfg.u64("eval.seed")?).stream(&[tag::EVAL, 1]);
            mixture.sample(cfg.usize("eval.reference_n")?, &mut rng)
        }
    };
    let p = projections.unwrap_or(cfg.usize("eval.projections")?);
    let value = sliced_wasserstein2(&a, &b, p, cfg.u64("eval.seed")?)?;
    let record = serde_json::json!({
        "sliced_w2": value,
        "n_samples": a.len(),
        "n_reference": b.len(),
        "projections": p,
    });
    println!("{record}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attack_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    points: &Path,
    sigma: Option<f64>,
    per_point: Option<usize>,
    train_sigma: Option<f64>,
    csv: Option<&Path>,
    json: Option<&Path>,
) -> atw_core::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let net = ck.net()?;
    let schedule: NoiseSchedule = ck.config.schedule.clone();
    let pts = load_dataset(points)?.samples;
    if pts.first().map(Vec::len) != Some(net.dim()) {
        return Err(Error::Dimension {
            expected: net.dim(),
            got: pts.first().map_or(0, Vec::len),
        });
    }
    let default_train_sigma = match ck.config.loss_kind {
        LossKind::Dsm => 0.0,
        _ => schedule.sigma_nature(),
    };
    let mut sampler = cfg.sampler_config()?;
    sampler.t_stop = 0.0;
    sampler.final_denoise = false;
    let ac = AttackConfig {
        sigma_attack: sigma.unwrap_or(cfg.f64("eval.attack_sigma")?),
        train_sigma: train_sigma.unwrap_or(default_train_sigma),
        n_per_point: per_point.unwrap_or(cfg.usize("eval.attack_per_point")?),
        sampler,
        seed: cfg.u64("eval.seed")?,
    };
    let mut report = memorization_attack(&net, &pts, &schedule, &ac)?;
    report.model_id = checkpoint.display().to_string();
    if let Some(p) = json {
        append_json_line(p, &report)?;
    }
    match csv {
        Some(p) => {
            std::fs::write(p, similarity_csv(&report))?;
            println!("{}", to_json_line(&report)?);
        }
        None => print!("{}", similarity_csv(&report)),
    }
    Ok(())
}

fn oracle_check_cmd(seed: u64) -> atw_core::Result<bool> {
    let suite = identity_suite(seed)?;
    println!("{:<34} {:>7} {:>12} {:>10}  result", "check", "probes", "max rel err", "tolerance");
    let mut ok = true;
    for c in &suite {
        let pass = c.passed();
        ok &= pass;
        println!(
            "{:<34} {:>7} {:>12.3e} {:>10.0e}  {}",
            c.name,
            c.probes,
            c.max_rel_err,
            c.tolerance,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn dispatch(command: Command) -> atw_core::Result<i32> {
    match command {
        Command::MakeDataset { out, n, seed, common } => {
            make_dataset_cmd(&load_config(&common)?, &out, n, seed)?;
        }
        Command::Train {
            out,
            metrics,
            resume,
            stop_after,
            common,
        } => train_cmd(&load_config(&common)?, &out, metrics.as_deref(), resume.as_deref(), stop_after)?,
        Command::Sample {
            checkpoint,
            oracle: _,
            out,
            steps,
            sampler,
            stop_time,
            early_stop,
            n,
            seed,
            common,
        } => sample_cmd(
            &mut load_config(&common)?,
            checkpoint.as_deref(),
            &out,
            steps,
            sampler.as_deref(),
            stop_time,
            early_stop,
            n,
            seed,
        )?,
        Command::EvalDenoiser {
            checkpoint,
            csv,
            json,
            common,
        } => eval_denoiser_cmd(&load_config(&common)?, &checkpoint, csv.as_deref(), json.as_deref())?,
        Command::EvalDist {
            samples,
            reference,
            projections,
            common,
        } => eval_dist_cmd(&load_config(&common)?, &samples, reference.as_deref(), projections)?,
        Command::Attack {
            checkpoint,
            points,
            sigma,
            per_point,
            train_sigma,
            csv,
            json,
            common,
        } => attack_cmd(
            &load_config(&common)?,
            &checkpoint,
            &points,
            sigma,
            per_point,
            train_sigma,
            csv.as_deref(),
            json.as_deref(),
        )?,
        Command::OracleCheck { seed, common } => {
            load_config(&common)?;
            if !oracle_check_cmd(seed)? {
                return Ok(EXIT_THRESHOLD);
            }
        }
        Command::ConfigEcho { common } => print!("{}", load_config(&common)?.echo()),
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
