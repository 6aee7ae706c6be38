//! Experiment drivers: decay fits, invariant-measure sampling, meet and
//! small-noise probabilities, and the full mixing experiment.
//!
//! Work fans out over chains with rayon; per-chain results are collected in
//! index order and reduced sequentially, so every output is a pure function
//! of the root seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{return_time_stats, run_coupled_chain, CouplingParams, CouplingRecord, ReturnTimeStats};
use crate::error::{Error, Result};
use crate::integrator::{advance, simulate_path, Discretization, Stepper};
use crate::noise::{stochastic_convolution, NoiseSpec};
use crate::rng::RngStream;
use crate::spectral::{GalerkinModel, SpectralState};
use crate::stats::{linear_fit, Estimate, MeanVar, Proportion};

/// Log-linear fit `p_n ~ C e^{-gamma n}` over the positive entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub series: Vec<(f64, f64)>,
    pub c: f64,
    pub gamma: f64,
    pub r_squared: f64,
    pub points_used: usize,
    pub censored: usize,
}

pub const MIN_DECAY_POINTS: usize = 4;

pub fn fit_exponential_decay(series: &[(f64, f64)]) -> Result<DecayFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = series.iter().filter(|(_, p)| *p > 0.0).map(|&(n, p)| (n, p.ln())).unzip();
    if xs.len() < MIN_DECAY_POINTS {
        return Err(Error::InsufficientData { needed: MIN_DECAY_POINTS, got: xs.len() });
    }
    let fit = linear_fit(&xs, &ys)?;
    Ok(DecayFit {
        series: series.to_vec(),
        c: fit.intercept.exp(),
        gamma: -fit.slope,
        r_squared: fit.r_squared,
        points_used: xs.len(),
        censored: 0,
    })
}

/// Occupation samples of a solo chain on a time grid after burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub samples: Vec<SpectralState>,
    pub burn_in: f64,
    pub spacing: f64,
    pub replicas: usize,
    /// Mean of `|x|^2`.
    pub mean_l2_sq: Estimate,
    /// Mean of `||x||^2 = sum mu_n x_n^2`.
    pub mean_h1_sq: Estimate,
    /// Mean of `x_n^2` per mode.
    pub mode_second_moments: Vec<Estimate>,
    pub censored: usize,
}

/// Sampling plan for [`estimate_invariant_measure`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantPlan {
    pub burn_in: f64,
    /// Time between retained samples.
    pub spacing: f64,
    /// Samples per replica.
    pub samples_per_replica: usize,
    /// Independent replicas; standard errors come from replica means.
    pub replicas: usize,
    pub disc: Discretization,
}

impl InvariantPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.burn_in >= 0.0 && self.burn_in.is_finite()) {
            return Err(Error::invalid("run.burn_in", "must be nonnegative"));
        }
        if self.samples_per_replica == 0 {
            return Err(Error::invalid("run.samples_per_replica", "must be positive"));
        }
        if self.replicas < 2 {
            return Err(Error::invalid("run.replicas", "need at least 2 replicas for standard errors"));
        }
        self.disc.steps_for(self.spacing)?;
        self.disc.steps_covering(self.burn_in)?;
        Ok(())
    }
}

/// Krylov–Bogoliubov style time averages from `x0`; replica `r` uses
/// `root.substream(r)`.
pub fn estimate_invariant_measure(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    x0: &SpectralState,
    plan: &InvariantPlan,
    root: &RngStream,
) -> Result<EmpiricalMeasure> {
    plan.validate()?;
    model.check(x0)?;
    noise.check(model)?;
    let burn_steps = if plan.burn_in == 0.0 { 0 } else { plan.disc.steps_covering(plan.burn_in)? };
    let gap = plan.disc.steps_for(plan.spacing)?;
    let runs: Vec<Option<Vec<SpectralState>>> = (0..plan.replicas)
        .into_par_iter()
        .map(|r| {
            let mut stepper = Stepper::new(model, noise, plan.disc)?;
            let mut rng = root.substream(r as u64);
            let mut x = x0.clone();
            if advance(&mut stepper, &mut x, burn_steps, &mut rng).is_none() {
                return Ok(None);
            }
            let mut out = Vec::with_capacity(plan.samples_per_replica);
            for _ in 0..plan.samples_per_replica {
                if advance(&mut stepper, &mut x, gap, &mut rng).is_none() {
                    return Ok(None);
                }
                out.push(x.clone());
            }
            Ok(Some(out))
        })
        .collect::<Result<_>>()?;
    let censored = runs.iter().filter(|r| r.is_none()).count();
    let kept: Vec<Vec<SpectralState>> = runs.into_iter().flatten().collect();
    if kept.len() < 2 {
        let limit = 1.0 - 2.0 / plan.replicas as f64;
        return Err(Error::CensoringOverflow { censored, total: plan.replicas, limit });
    }
    let mu = model.eigenvalues();
    let replica_stat = |f: &dyn Fn(&SpectralState) -> f64| -> Estimate {
        let means: MeanVar = kept.iter().map(|run| run.iter().map(f).sum::<f64>() / run.len() as f64).collect();
        let mut e = means.estimate(censored);
        e.n = kept.len() * plan.samples_per_replica;
        e
    };
    let mean_l2_sq = replica_stat(&|x| x.norm_sq());
    let mean_h1_sq = replica_stat(&|x| x.0.iter().zip(mu).map(|(v, m)| m * v * v).sum());
    let mode_second_moments = (0..model.dim()).map(|n| replica_stat(&|x| x[n] * x[n])).collect();
    Ok(EmpiricalMeasure {
        samples: kept.into_iter().flatten().collect(),
        burn_in: plan.burn_in,
        spacing: plan.spacing,
        replicas: plan.replicas,
        mean_l2_sq,
        mean_h1_sq,
        mode_second_moments,
        censored,
    })
}

/// Uniform draw from `{x : ||x||_2^2 <= radius_sq}`.
pub fn sample_h2_ball(model: &GalerkinModel, radius_sq: f64, rng: &mut RngStream) -> SpectralState {
    let d = model.dim();
    let mut y: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = rng.uniform().powf(1.0 / d as f64);
    let scale = radius_sq.sqrt() * r / norm;
    for (v, mu) in y.iter_mut().zip(model.eigenvalues()) {
        *v *= scale / mu;
    }
    SpectralState(y)
}

pub const MIN_MEET_CHAINS: usize = 100;

/// Fraction of i.i.d. pairs drawn uniformly from the `H2` ball of squared
/// radius `radius_sq` that meet within one macro step.
pub fn estimate_meet_probability(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    params: &CouplingParams,
    radius_sq: f64,
    n_chains: usize,
    root: &RngStream,
) -> Result<Proportion> {
    if !(radius_sq > 0.0) {
        return Err(Error::invalid("ball_radius", "must be positive"));
    }
    let pairs: Vec<(SpectralState, SpectralState)> = (0..n_chains)
        .map(|k| {
            let mut rng = root.substream(2 * k as u64);
            (sample_h2_ball(model, radius_sq, &mut rng), sample_h2_ball(model, radius_sq, &mut rng))
        })
        .collect();
    meet_probability_from_pairs(model, noise, params, &pairs, root)
}

/// As [`estimate_meet_probability`] from explicit start pairs; pair `k`
/// couples on `root.substream(2k + 1)`.
pub fn meet_probability_from_pairs(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    params: &CouplingParams,
    pairs: &[(SpectralState, SpectralState)],
    root: &RngStream,
) -> Result<Proportion> {
    if pairs.len() < MIN_MEET_CHAINS {
        return Err(Error::InsufficientData { needed: MIN_MEET_CHAINS, got: pairs.len() });
    }
    let mut one = *params;
    one.max_macro_steps = 1;
    let outcomes: Vec<Option<bool>> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (x1, x2))| {
            let rec = run_coupled_chain(model, noise, &one, x1, x2, root.substream(2 * k as u64 + 1))?;
            Ok((!rec.is_censored()).then(|| rec.met_by(1)))
        })
        .collect::<Result<_>>()?;
    let censored = outcomes.iter().filter(|o| o.is_none()).count();
    let trials = outcomes.len() - censored;
    if trials < MIN_MEET_CHAINS {
        return Err(Error::InsufficientData { needed: MIN_MEET_CHAINS, got: trials });
    }
    let successes = outcomes.iter().flatten().filter(|&&m| m).count();
    Ok(Proportion::new(successes, trials, censored))
}

/// One cell of a `(T, delta)` calibration grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub macro_length: f64,
    pub delta: f64,
    pub meet: Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingCalibration {
    pub grid: Vec<CalibrationPoint>,
    /// Index into `grid` of the chosen cell: the largest `delta` whose Wilson
    /// lower bound reaches `target`, ties going to the shorter `T`.
    pub chosen: Option<usize>,
    pub target: f64,
}

/// Grid search over `(T, delta)`: for every pair the one-step meet
/// probability from the `delta` ball is estimated with `n_chains` pairs.
/// Cell `i` (row-major, `T` outer) runs on `root.substream(i)`; every `T`
/// must be a multiple of `base.dt`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_coupling(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    base: &CouplingParams,
    macro_lengths: &[f64],
    deltas: &[f64],
    n_chains: usize,
    target: f64,
    root: &RngStream,
) -> Result<CouplingCalibration> {
    if macro_lengths.is_empty() || deltas.is_empty() {
        return Err(Error::invalid("grid", "needs at least one T and one delta"));
    }
    let mut grid = Vec::with_capacity(macro_lengths.len() * deltas.len());
    for &t in macro_lengths {
        for &delta in deltas {
            let mut params = *base;
            params.macro_length = t;
            params.delta = delta;
            params.validate()?;
            let cell = root.substream(grid.len() as u64);
            let meet = estimate_meet_probability(model, noise, &params, delta, n_chains, &cell)?;
            grid.push(CalibrationPoint { macro_length: t, delta, meet });
        }
    }
    let chosen = grid
        .iter()
        .enumerate()
        .filter(|(_, c)| c.meet.lower >= target)
        .min_by(|(_, a), (_, b)| b.delta.total_cmp(&a.delta).then(a.macro_length.total_cmp(&b.macro_length)))
        .map(|(i, _)| i);
    Ok(CouplingCalibration { grid, chosen, target })
}

/// `P(sup_{[0,t]} ||Z||_2^2 <= M)` for each `M` in `levels`, with `Z` the
/// stochastic convolution along simulated paths from `x0`.
#[allow(clippy::too_many_arguments)]
pub fn small_noise_probability(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    x0: &SpectralState,
    t: f64,
    levels: &[f64],
    n_samples: usize,
    disc: Discretization,
    root: &RngStream,
) -> Result<Vec<Proportion>> {
    if let Some(&m) = levels.iter().find(|&&m| !(m > 0.0)) {
        return Err(Error::invalid("M", format!("must be positive, got {m}")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be positive"));
    }
    let sups = sup_convolution_samples(model, noise, x0, t, n_samples, disc, root)?;
    let censored = sups.iter().filter(|s| s.is_none()).count();
    let ok: Vec<f64> = sups.into_iter().flatten().collect();
    Ok(levels
        .iter()
        .map(|&m| Proportion::new(ok.iter().filter(|&&s| s <= m).count(), ok.len(), censored))
        .collect())
}

/// `sup_{[0,t]} ||Z||_2^2` per path; `None` for blown-up paths.
pub fn sup_convolution_samples(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    x0: &SpectralState,
    t: f64,
    n_samples: usize,
    disc: Discretization,
    root: &RngStream,
) -> Result<Vec<Option<f64>>> {
    (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let path = simulate_path(model, noise, x0, t, disc, root.substream(k as u64))?;
            if path.blown_up.is_some() {
                return Ok(None);
            }
            let z = stochastic_convolution(model, noise, &path)?;
            Ok(Some(z.iter().map(|s| model.h2_sq(s.as_slice())).fold(0.0, f64::max)))
        })
        .collect()
}

/// Half the L1 distance between the binned empirical laws of `a` and `b`
/// over `bins` equal bins spanning both samples; a lower bound on TV up to
/// sampling error.
pub fn histogram_tv(a: &[f64], b: &[f64], bins: usize) -> f64 {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return 0.0;
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for x in v {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            h[i] += 1.0 / v.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>()
}

/// Everything a mixing run needs besides the model and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingSetup {
    pub params: CouplingParams,
    pub x0_1: SpectralState,
    pub x0_2: SpectralState,
    pub n_chains: usize,
    pub alphas: Vec<f64>,
    pub invariant: InvariantPlan,
    /// Largest tolerated censored fraction of chains.
    pub max_censored_fraction: f64,
    pub histogram_bins: usize,
}

/// Per-`n` row of the mixing series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub n: usize,
    pub time: f64,
    /// `P(X1(nT) != X2(nT))`
    pub p_unmet: Proportion,
    /// Binned TV between the two components' `x_0` samples at `nT`.
    pub tv_histogram: f64,
    /// `tv_histogram <= p_unmet + 3 SE`.
    pub coupling_inequality_ok: bool,
}

/// `P(k0 > n)` against the geometric bound `(1 - p)^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct K0TailPoint {
    pub n: usize,
    pub tail: Proportion,
    pub geometric_bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub series: Vec<DecayPoint>,
    pub decay: DecayFit,
    /// `gamma / T`, the fitted rate per unit time.
    pub gamma_per_time: f64,
    pub per_attempt: Proportion,
    pub k0_tail: Vec<K0TailPoint>,
    pub return_times: ReturnTimeStats,
    pub invariant: EmpiricalMeasure,
    pub delta3: f64,
    pub n_chains: usize,
    pub censored: usize,
    pub persistence_violations: usize,
}

/// Pilot quantile used for `delta3` when it is not configured.
pub const DELTA3_PILOT_QUANTILE: f64 = 0.5;

/// Runs `n_chains` coupled chains from the configured pair (chain `k` on
/// `root.substream(k)`) and a solo invariant-measure estimate on
/// `root.substream(u64::MAX)`. Also returns the raw records.
pub fn mixing_experiment(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    setup: &MixingSetup,
    root: &RngStream,
) -> Result<(MixingReport, Vec<CouplingRecord>)> {
    setup.params.validate()?;
    noise.ensure_nondegenerate()?;
    if setup.n_chains == 0 {
        return Err(Error::invalid("run.n_chains", "must be positive"));
    }
    let invariant = estimate_invariant_measure(model, noise, &setup.x0_1, &setup.invariant, &root.substream(u64::MAX))?;
    let mut params = setup.params;
    let delta3 = match params.delta3 {
        Some(d) => d,
        None => {
            let mut l2: Vec<f64> = invariant.samples.iter().map(|x| x.norm_sq()).collect();
            l2.sort_by(f64::total_cmp);
            l2[((l2.len() - 1) as f64 * DELTA3_PILOT_QUANTILE) as usize]
        }
    };
    params.delta3 = Some(delta3);

    let records: Vec<CouplingRecord> = (0..setup.n_chains)
        .into_par_iter()
        .map(|k| run_coupled_chain(model, noise, &params, &setup.x0_1, &setup.x0_2, root.substream(k as u64)))
        .collect::<Result<_>>()?;
    let censored = records.iter().filter(|r| r.is_censored()).count();
    let limit = (setup.max_censored_fraction * setup.n_chains as f64).floor() as usize;
    if censored > limit {
        return Err(Error::CensoringOverflow { censored, total: setup.n_chains, limit: setup.max_censored_fraction });
    }
    let ok: Vec<&CouplingRecord> = records.iter().filter(|r| !r.is_censored()).collect();
    let t_len = params.macro_length;

    let series: Vec<DecayPoint> = (1..=params.max_macro_steps)
        .map(|n| {
            let unmet = ok.iter().filter(|r| !r.met_by(n)).count();
            let p_unmet = Proportion::new(unmet, ok.len(), censored);
            let a: Vec<f64> = ok.iter().map(|r| r.states[n].0[0]).collect();
            let b: Vec<f64> = ok.iter().map(|r| r.states[n].1[0]).collect();
            let tv = histogram_tv(&a, &b, setup.histogram_bins);
            DecayPoint {
                n,
                time: n as f64 * t_len,
                p_unmet,
                tv_histogram: tv,
                coupling_inequality_ok: tv <= p_unmet.value + 3.0 * p_unmet.std_err(),
            }
        })
        .collect();
    let mut decay = fit_exponential_decay(&series.iter().map(|p| (p.n as f64, p.p_unmet.value)).collect::<Vec<_>>())?;
    decay.censored = censored;

    let attempts: usize = ok.iter().map(|r| r.attempts()).sum();
    let successes = ok.iter().filter(|r| r.k0.is_some()).count();
    let per_attempt = Proportion::new(successes, attempts, censored);
    // chains that meet outside an attempt (equal starts) have no k0 and are left out
    let with_attempts: Vec<&&CouplingRecord> = ok.iter().filter(|r| r.attempts() > 0 || r.meeting_step.is_none()).collect();
    let k0_tail = (0..params.max_macro_steps)
        .map(|n| {
            let above = with_attempts.iter().filter(|r| r.k0.is_none_or(|k| k > n)).count();
            let tail = Proportion::new(above, with_attempts.len(), censored);
            let geometric_bound = (1.0 - per_attempt.value).powi(n as i32);
            K0TailPoint { n, tail, geometric_bound, within_bound: tail.value <= geometric_bound + 3.0 * tail.std_err() }
        })
        .collect();
    let owned: Vec<CouplingRecord> = ok.iter().map(|r| (*r).clone()).collect();
    let return_times = return_time_stats(&owned, &setup.alphas)?;
    let persistence_violations = records.iter().map(|r| r.persistence_violations).sum();

    let report = MixingReport {
        series,
        gamma_per_time: decay.gamma / t_len,
        decay,
        per_attempt,
        k0_tail,
        return_times,
        invariant,
        delta3,
        n_chains: setup.n_chains,
        censored,
        persistence_violations,
    };
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::ProximityRule;
    use crate::integrator::Scheme;
    use crate::spectral::build_shell_model_with;

    #[test]
    fn exact_decay_fit() {
        let series: Vec<(f64, f64)> = (1..=10).map(|n| (n as f64, 3.0 * (-0.5 * n as f64).exp())).collect();
        let f = fit_exponential_decay(&series).unwrap();
        assert!((f.c - 3.0).abs() < 1e-10 && (f.gamma - 0.5).abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-10);
        let flat: Vec<(f64, f64)> = (1..=6).map(|n| (n as f64, 0.2)).collect();
        assert_eq!(fit_exponential_decay(&flat).unwrap().gamma.abs(), 0.0);
        let sparse = [(1.0, 0.5), (2.0, 0.0), (3.0, 0.1), (4.0, 0.0), (5.0, 0.01)];
        assert!(fit_exponential_decay(&sparse).is_err());
    }

    #[test]
    fn noisy_decay_fit() {
        let mut rng = RngStream::new(4, 0);
        let gamma = 0.3;
        let series: Vec<(f64, f64)> =
            (1..=20).map(|n| (n as f64, (-gamma * n as f64).exp() * (1.0 + 0.05 * rng.normal()))).collect();
        let f = fit_exponential_decay(&series).unwrap();
        assert!((f.gamma - gamma).abs() < 0.1 * gamma, "{}", f.gamma);
    }

    #[test]
    fn histogram_tv_limits() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(histogram_tv(&a, &a, 10), 0.0);
        let b: Vec<f64> = (0..100).map(|i| 1000.0 + i as f64).collect();
        assert!((histogram_tv(&a, &b, 10) - 1.0).abs() < 1e-12);
    }

    fn ou() -> (GalerkinModel, NoiseSpec) {
        let model = build_shell_model_with(3, 0.0, 1.0, 1.5).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        (model, noise)
    }

    #[test]
    fn ou_invariant_moments() {
        let (model, noise) = ou();
        let plan = InvariantPlan {
            burn_in: 5.0,
            spacing: 0.5,
            samples_per_replica: 200,
            replicas: 20,
            disc: Discretization::new(1e-3, Scheme::SemiImplicit).unwrap(),
        };
        let m = estimate_invariant_measure(&model, &noise, &model.zero_state(), &plan, &RngStream::new(1, 0)).unwrap();
        for (n, e) in m.mode_second_moments.iter().enumerate() {
            let mu = model.eigenvalues()[n];
            let b = noise.base_amplitudes()[n];
            // left-point exponential scheme: b^2 dt e^{-2 mu dt} / (1 - e^{-2 mu dt})
            let q = (-2.0 * mu * 1e-3).exp();
            let exact = b * b * 1e-3 * q / (1.0 - q);
            assert!((exact / (b * b / (2.0 * mu)) - 1.0).abs() < 0.01);
            assert!(e.within(exact, 3.0), "mode {n}: {e:?} vs {exact}");
        }
        assert_eq!(m.samples.len(), 4000);
    }

    #[test]
    fn meet_probability_basics() {
        let (model, noise) = ou();
        let params = CouplingParams {
            macro_length: 1.0,
            delta: 0.5,
            dt: 1e-2,
            rho: 3.0,
            max_macro_steps: 1,
            delta3: None,
            proximity: ProximityRule::Mahalanobis,
            scheme: Scheme::SemiImplicit,
        };
        let x = SpectralState(vec![0.1, 0.0, 0.0]);
        let pairs = vec![(x.clone(), x); 100];
        let p = meet_probability_from_pairs(&model, &noise, &params, &pairs, &RngStream::new(0, 0)).unwrap();
        assert_eq!(p.value, 1.0);
        assert!(meet_probability_from_pairs(&model, &noise, &params, &pairs[..50], &RngStream::new(0, 0)).is_err());

        let mut last = 0.0;
        for r in [0.5, 0.05, 0.005] {
            let p = estimate_meet_probability(&model, &noise, &params, r, 400, &RngStream::new(3, 0)).unwrap();
            assert!(p.value >= last - 0.02, "{r}: {} < {last}", p.value);
            last = p.value;
        }
        assert!(last > 0.5);
    }

    #[test]
    fn calibration_grid_picks_largest_passing_delta() {
        let (model, noise) = ou();
        let base = CouplingParams {
            macro_length: 1.0,
            delta: 0.5,
            dt: 1e-2,
            rho: 3.0,
            max_macro_steps: 1,
            delta3: None,
            proximity: ProximityRule::Mahalanobis,
            scheme: Scheme::SemiImplicit,
        };
        let deltas = [0.5, 0.05, 0.005];
        let root = RngStream::new(5, 0);
        let cal = calibrate_coupling(&model, &noise, &base, &[0.5, 1.0], &deltas, 200, 0.5, &root).unwrap();
        assert_eq!(cal.grid.len(), 6);
        assert_eq!((cal.grid[4].macro_length, cal.grid[4].delta), (1.0, 0.05));
        let i = cal.chosen.expect("the smallest ball meets often");
        let c = &cal.grid[i];
        assert!(c.meet.lower >= 0.5);
        assert!(cal.grid.iter().all(|g| g.meet.lower < 0.5 || g.delta <= c.delta));
        let none = calibrate_coupling(&model, &noise, &base, &[1.0], &deltas, 200, 1.1, &root).unwrap();
        assert_eq!(none.chosen, None);
        assert!(calibrate_coupling(&model, &noise, &base, &[0.015], &deltas, 200, 0.5, &root).is_err());
    }

    #[test]
    fn ball_samples_stay_inside() {
        let (model, _) = ou();
        let mut rng = RngStream::new(2, 0);
        for _ in 0..1000 {
            let x = sample_h2_ball(&model, 0.3, &mut rng);
            assert!(model.h2_sq(x.as_slice()) <= 0.3 + 1e-15);
        }
    }

    #[test]
    fn small_noise_is_monotone() {
        let (model, noise) = ou();
        let disc = Discretization::new(1e-2, Scheme::SemiImplicit).unwrap();
        let root = RngStream::new(5, 0);
        let sups: Vec<f64> =
            sup_convolution_samples(&model, &noise, &model.zero_state(), 1.0, 200, disc, &root).unwrap().into_iter().flatten().collect();
        let mut sorted = sups.clone();
        sorted.sort_by(f64::total_cmp);
        let q20 = sorted[40];
        let levels = [q20 * 0.5, q20, q20 * 2.0, q20 * 4.0, 1e300];
        let ps = small_noise_probability(&model, &noise, &model.zero_state(), 1.0, &levels, 200, disc, &root).unwrap();
        assert!(ps.windows(2).all(|w| w[0].value <= w[1].value));
        assert!(ps[1].value > 0.0);
        assert_eq!(ps[4].value, 1.0);
        assert!(small_noise_probability(&model, &noise, &model.zero_state(), 1.0, &[0.0], 10, disc, &root).is_err());
    }
}
