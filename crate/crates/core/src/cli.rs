//! Command dispatch behind the `nsmix` binary.
//!
//! Every command loads and validates the configuration, runs one experiment,
//! writes its files into the output directory and finishes with
//! `manifest.toml`: the effective configuration plus a `provenance` table.
//! Feeding the manifest back as `--config` reproduces the outputs.

use std::path::PathBuf;

use serde_json::json;

use crate::bel::{calibrate_k0, estimate_gradient, gradient_difference, BelProblem, CutoffSpec, K0_PILOT_QUANTILE};
use crate::config::{Command, ExperimentConfig};
use crate::coupling::run_coupled_chain;
use crate::error::Error;
use crate::integrator::simulate_path;
use crate::io::{fmt_opt, fmt_opt_usize, OutputDir};
use crate::lab::{estimate_invariant_measure, estimate_meet_probability, mixing_experiment, small_noise_probability, sup_convolution_samples};
use crate::rng::RngStream;
use crate::stats::Proportion;

/// Version stamped into every `summary.json`.
pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CENSORED: i32 = 3;

/// Stream keys under the root seed, one per experiment role.
const STREAM_MAIN: u64 = 0;
const STREAM_MEET: u64 = 1;
const STREAM_INVARIANT: u64 = 2;
const STREAM_SMALL_NOISE: u64 = 3;
const STREAM_PILOT: u64 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(Error),
    #[error("{0}")]
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Run(Error::CensoringOverflow { .. }) => EXIT_CENSORED,
            CliError::Run(_) => EXIT_RUNTIME,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

/// Command-line inputs after parsing.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub overrides: Vec<String>,
}

/// What a successful command wrote.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
}

pub fn load_config(inv: &Invocation) -> Result<ExperimentConfig, CliError> {
    let mut overrides = inv.overrides.clone();
    if let Some(seed) = inv.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    if let Some(out) = &inv.out {
        overrides.push(format!("run.output_dir={}", toml::Value::String(out.display().to_string())));
    }
    if !inv.config.is_file() {
        return Err(CliError::Config(Error::Config(format!("config file `{}` not found", inv.config.display()))));
    }
    ExperimentConfig::load(&inv.config, &overrides).map_err(CliError::Config)
}

pub fn run(command: Command, inv: &Invocation) -> Result<Outcome, CliError> {
    let cfg = load_config(inv)?;
    if let Some(want) = cfg.command {
        if want != command {
            return Err(CliError::Config(Error::Config(format!(
                "config is for `{}` but `{}` was requested",
                want.as_str(),
                command.as_str()
            ))));
        }
    }
    if cfg.bel.is_none() && command == Command::BelCheck {
        return Err(CliError::Config(Error::Config("`bel-check` needs a [bel] block".into())));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = inv.threads {
        if n == 0 {
            return Err(CliError::Config(Error::invalid("threads", "must be positive")));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Run(Error::Config(e.to_string())))?;
    pool.install(|| execute(command, &cfg))
}

fn execute(command: Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut out = OutputDir::create(&cfg.run.output_dir)?;
    match command {
        Command::Simulate => simulate(cfg, &mut out)?,
        Command::Couple => couple(cfg, &mut out)?,
        Command::Mix => mix(cfg, &mut out)?,
        Command::BelCheck => bel_check(cfg, &mut out)?,
        Command::Invariant => invariant(cfg, &mut out)?,
        Command::SmallNoise => small_noise(cfg, &mut out)?,
    }
    write_manifest(cfg, command, &mut out)?;
    Ok(Outcome { output_dir: out.root().to_path_buf(), files: out.written().to_vec() })
}

fn write_manifest(cfg: &ExperimentConfig, command: Command, out: &mut OutputDir) -> Result<(), CliError> {
    let mut manifest = cfg.clone();
    manifest.command = Some(command);
    let mut prov = toml::Table::new();
    prov.insert("tool".into(), "nsmix".into());
    prov.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    prov.insert("command".into(), command.as_str().into());
    prov.insert("seed".into(), toml::Value::String(cfg.run.seed.to_string()));
    let mut files: Vec<toml::Value> = out.written().iter().map(|f| toml::Value::String(f.clone())).collect();
    files.push("manifest.toml".into());
    prov.insert("files".into(), toml::Value::Array(files));
    manifest.provenance = Some(prov);
    let text = manifest.to_toml_string()?;
    out.text("manifest.toml", &text)?;
    Ok(())
}

fn proportion_row(p: &Proportion) -> [String; 5] {
    [p.successes.to_string(), p.trials.to_string(), p.value.to_string(), p.lower.to_string(), p.upper.to_string()]
}

fn simulate(cfg: &ExperimentConfig, out: &mut OutputDir) -> crate::Result<()> {
    let model = cfg.build_model()?;
    let noise = cfg.build_noise(&model)?;
    let disc = cfg.solo_discretization(&model)?;
    let (x0, _) = cfg.initial_pair(&model);
    let rec = simulate_path(&model, &noise, &x0, cfg.run.horizon, disc, RngStream::new(cfg.run.seed, STREAM_MAIN))?;
    out.text("trajectory.json", &rec.to_json()?)?;
    let mu = model.eigenvalues();
    out.csv(
        "series.csv",
        &["t", "l2_sq", "h1_sq", "h2_sq"],
        rec.times.iter().zip(&rec.states).map(|(t, x)| {
            let h1: f64 = x.0.iter().zip(mu).map(|(v, m)| m * v * v).sum();
            vec![t.to_string(), x.norm_sq().to_string(), h1.to_string(), model.h2_sq(x.as_slice()).to_string()]
        }),
    )?;
    out.json(
        "summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "simulate",
            "dim": model.dim(),
            "dt": disc.dt,
            "steps": rec.states.len() - 1,
            "horizon": rec.horizon(),
            "blown_up": rec.blown_up,
            "final_state": rec.last_state(),
        }),
    )?;
    if rec.blown_up.is_some() {
        return Err(Error::CensoringOverflow { censored: 1, total: 1, limit: 0.0 });
    }
    Ok(())
}

fn couple(cfg: &ExperimentConfig, out: &mut OutputDir) -> crate::Result<()> {
    let model = cfg.build_model()?;
    let noise = cfg.build_noise(&model)?;
    let params = cfg.coupling_params()?;
    let (x1, x2) = cfg.initial_pair(&model);
    let rec = run_coupled_chain(&model, &noise, &params, &x1, &x2, RngStream::new(cfg.run.seed, STREAM_MAIN))?;
    out.csv(
        "macro_steps.csv",
        &["step", "time", "branch", "distance", "met", "kernel_attempts"],
        rec.rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.time.to_string(),
                r.branch.as_str().to_owned(),
                r.distance.to_string(),
                r.met.to_string(),
                r.kernel_attempts.to_string(),
            ]
        }),
    )?;
    out.json(
        "summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "couple",
            "meeting_step": rec.meeting_step,
            "tau": rec.tau,
            "tau_l2": rec.tau_l2,
            "tau_k": rec.tau_k,
            "k0": rec.k0,
            "censored": rec.censored,
            "persistence_violations": rec.persistence_violations,
        }),
    )?;
    if rec.is_censored() {
        return Err(Error::CensoringOverflow { censored: 1, total: 1, limit: 0.0 });
    }
    Ok(())
}

fn mix(cfg: &ExperimentConfig, out: &mut OutputDir) -> crate::Result<()> {
    let model = cfg.build_model()?;
    let noise = cfg.build_noise(&model)?;
    let setup = cfg.mixing_setup(&model)?;
    let root = RngStream::new(cfg.run.seed, STREAM_MAIN);
    let (report, records) = mixing_experiment(&model, &noise, &setup, &root)?;

    out.csv(
        "decay.csv",
        &["n", "time", "unmet", "chains", "p_unmet", "lower", "upper", "tv_histogram", "coupling_inequality_ok"],
        report.series.iter().map(|p| {
            let mut row = vec![p.n.to_string(), p.time.to_string()];
            row.extend(proportion_row(&p.p_unmet));
            row.push(p.tv_histogram.to_string());
            row.push(p.coupling_inequality_ok.to_string());
            row
        }),
    )?;
    out.csv(
        "tau.csv",
        &["chain", "tau", "tau_l2", "meeting_step", "k0", "attempts", "censored"],
        records.iter().enumerate().map(|(k, r)| {
            vec![
                k.to_string(),
                fmt_opt(r.tau),
                fmt_opt(r.tau_l2),
                fmt_opt_usize(r.meeting_step),
                fmt_opt_usize(r.k0),
                r.attempts().to_string(),
                r.is_censored().to_string(),
            ]
        }),
    )?;
    out.csv(
        "tau_tail.csv",
        &["t", "survival"],
        report.return_times.survival.iter().map(|(t, s)| vec![t.to_string(), s.to_string()]),
    )?;
    out.csv(
        "moments.csv",
        &["alpha", "mean", "se", "running_spread", "divergent"],
        report.return_times.moments.iter().map(|m| {
            vec![m.alpha.to_string(), m.mean.to_string(), m.se.to_string(), m.running_spread.to_string(), m.divergent.to_string()]
        }),
    )?;
    out.csv(
        "k0_tail.csv",
        &["n", "above", "chains", "p_k0_above", "lower", "upper", "geometric_bound", "within_bound"],
        report.k0_tail.iter().map(|p| {
            let mut row = vec![p.n.to_string()];
            row.extend(proportion_row(&p.tail));
            row.push(p.geometric_bound.to_string());
            row.push(p.within_bound.to_string());
            row
        }),
    )?;
    let meet_root = RngStream::new(cfg.run.seed, STREAM_MEET);
    let sweep: Vec<(f64, Proportion)> = cfg
        .meet_radii()
        .into_iter()
        .map(|r| Ok((r, estimate_meet_probability(&model, &noise, &setup.params, r, cfg.run.n_chains, &meet_root)?)))
        .collect::<crate::Result<_>>()?;
    out.csv(
        "meet_sweep.csv",
        &["radius_sq", "met", "pairs", "p_meet", "lower", "upper"],
        sweep.iter().map(|(r, p)| {
            let mut row = vec![r.to_string()];
            row.extend(proportion_row(p));
            row
        }),
    )?;
    write_invariant_moments(out, &model, &report.invariant)?;
    out.json(
        "summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "mix",
            "n_chains": report.n_chains,
            "censored": report.censored,
            "persistence_violations": report.persistence_violations,
            "macro_length": setup.params.macro_length,
            "delta": setup.params.delta,
            "delta3": report.delta3,
            "decay": {
                "c": report.decay.c,
                "gamma": report.decay.gamma,
                "gamma_per_time": report.gamma_per_time,
                "r_squared": report.decay.r_squared,
                "points_used": report.decay.points_used,
            },
            "per_attempt_meet": report.per_attempt,
            "meet_probability": sweep.first().map(|(_, p)| p),
            "return_times": {
                "n": report.return_times.n,
                "censored": report.return_times.censored,
                "mean_tau": report.return_times.mean_tau,
                "tail_rate": report.return_times.tail.rate,
            },
            "invariant": {
                "mean_l2_sq": report.invariant.mean_l2_sq,
                "mean_h1_sq": report.invariant.mean_h1_sq,
                "censored": report.invariant.censored,
            },
        }),
    )?;
    Ok(())
}

fn write_invariant_moments(
    out: &mut OutputDir,
    model: &crate::GalerkinModel,
    m: &crate::lab::EmpiricalMeasure,
) -> crate::Result<()> {
    out.csv(
        "invariant_moments.csv",
        &["mode", "mu", "mean_sq", "se"],
        m.mode_second_moments
            .iter()
            .enumerate()
            .map(|(n, e)| vec![n.to_string(), model.eigenvalues()[n].to_string(), e.value.to_string(), e.se.to_string()]),
    )?;
    Ok(())
}

fn invariant(cfg: &ExperimentConfig, out: &mut OutputDir) -> crate::Result<()> {
    let model = cfg.build_model()?;
    let noise = cfg.build_noise(&model)?;
    let plan = cfg.invariant_plan(&model)?;
    let (x0, _) = cfg.initial_pair(&model);
    let m = estimate_invariant_measure(&model, &noise, &x0, &plan, &RngStream::new(cfg.run.seed, STREAM_INVARIANT))?;
    write_invariant_moments(out, &model, &m)?;
    out.json(
        "summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "invariant",
            "samples": m.samples.len(),
            "replicas": m.replicas,
            "burn_in": m.burn_in,
            "spacing": m.spacing,
            "mean_l2_sq": m.mean_l2_sq,
            "mean_h1_sq": m.mean_h1_sq,
            "censored": m.censored,
        }),
    )?;
    let limit = (cfg.run.max_censored_fraction * plan.replicas as f64).floor() as usize;
    if m.censored > limit {
        return Err(Error::CensoringOverflow { censored: m.censored, total: plan.replicas, limit: cfg.run.max_censored_fraction });
    }
    Ok(())
}

/// Levels used when none are configured: pilot quantiles of `sup ||Z||_2^2`.
pub const SMALL_NOISE_QUANTILES: [f64; 5] = [0.1, 0.2, 0.4, 0.6, 0.8];

fn small_noise(cfg: &ExperimentConfig, out: &mut OutputDir) -> crate::Result<()> {
    let model = cfg.build_model()?;
    let noise = cfg.build_noise(&model)?;
    let disc = cfg.solo_discretization(&model)?;
    let sn = &cfg.small_noise;
    let t = sn.t.unwrap_or(cfg.run.horizon);
    let (x0, _) = cfg.initial_pair(&model);
    let levels = match &sn.levels {
        Some(l) => l.clone(),
        None => {
            let pilot = sup_convolution_samples(&model, &noise, &x0, t, sn.n_samples, disc, &RngStream::new(cfg.run.seed, STREAM_PILOT))?;
            let mut ok: Vec<f64> = pilot.into_iter().flatten().collect();
            if ok.is_empty() {
                return Err(Error::CensoringOverflow { censored: sn.n_samples, total: sn.n_samples, limit: cfg.run.max_censored_fraction });
            }
            ok.sort_by(f64::total_cmp);
            SMALL_NOISE_QUANTILES.iter().map(|q| ok[((ok.len() - 1) as f64 * q) as usize]).collect()
        }
    };
    let ps = small_noise_probability(&model, &noise, &x0, t, &levels, sn.n_samples, disc, &RngStream::new(cfg.run.seed, STREAM_SMALL_NOISE))?;
    out.csv(
        "small_noise.csv",
        &["M", "below", "paths", "p", "lower", "upper"],
        levels.iter().zip(&ps).map(|(m, p)| {
            let mut row = vec![m.to_string()];
            row.extend(proportion_row(p));
            row
        }),
    )?;
    let censored = ps.first().map_or(0, |p| p.censored);
    out.json("summary.json", &json!({ "schema_version": SCHEMA_VERSION, "command": "small-noise", "t": t, "levels": levels, "estimates": ps }))?;
    let limit = (cfg.run.max_censored_fraction * sn.n_samples as f64).floor() as usize;
    if censored > limit {
        return Err(Error::CensoringOverflow { censored, total: sn.n_samples, limit: cfg.run.max_censored_fraction });
    }
    Ok(())
}

fn bel_check(cfg: &ExperimentConfig, out: &mut OutputDir) -> crate::Result<()> {
    let b = cfg.bel.as_ref().expect("checked by run");
    let model = cfg.build_model()?;
    let noise = cfg.build_noise(&model)?;
    let disc = cfg.bel_discretization(&model)?;
    let (x1, _) = cfg.initial_pair(&model);
    let (k0, k0_source) = match b.k0 {
        Some(k) => (k, "config"),
        None => {
            let pilot = RngStream::new(cfg.run.seed, STREAM_PILOT);
            (calibrate_k0(&model, &noise, &x1, b.horizon, disc, b.n_samples, K0_PILOT_QUANTILE, &pilot)?, "pilot")
        }
    };
    let problem = BelProblem {
        model: &model,
        noise: &noise,
        cutoff: CutoffSpec::new(k0)?,
        observable: b.observable,
        horizon: b.horizon,
        disc,
    };
    let x2 = crate::SpectralState(b.x0_target.clone());
    let h = x2.sub(&x1);
    let root = RngStream::new(cfg.run.seed, STREAM_MAIN);
    let bel = gradient_difference(&problem, &x1, &x2, b.n_samples, b.theta_nodes, &root.substream(1))?;
    let at1 = estimate_gradient(&problem, &x1, &h, b.n_samples, &root.substream(2))?;
    let at2 = estimate_gradient(&problem, &x2, &h, b.n_samples, &root.substream(3))?;
    let direct = at2.g_psi.value - at1.g_psi.value;
    let combined_se = (bel.se * bel.se + at1.g_psi.se * at1.g_psi.se + at2.g_psi.se * at2.g_psi.se).sqrt();
    let z = (bel.value - direct) / combined_se;
    out.json(
        "summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "bel-check",
            "k0": if k0.is_finite() { json!(k0) } else { json!("inf") },
            "k0_source": k0_source,
            "bel_difference": bel,
            "direct_difference": { "value": direct, "se": (at1.g_psi.se.powi(2) + at2.g_psi.se.powi(2)).sqrt() },
            "combined_se": combined_se,
            "z": z,
            "agree_within_3se": z.abs() <= 3.0,
            "gradient_at_x0": { "bel": at1.bel, "pathwise": at1.pathwise },
        }),
    )?;
    Ok(())
}

/// Resolves the output directory a command would use, for callers that
/// want to inspect files afterwards.
pub fn output_dir_for(inv: &Invocation) -> Result<PathBuf, CliError> {
    Ok(load_config(inv)?.run.output_dir)
}
