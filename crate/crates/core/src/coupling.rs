//! Paired-chain coupling on the macro grid `T N`.
//!
//! A macro step picks one of three branches from the pair at its start:
//! equal states move together, two states inside the `H2` ball of radius
//! `sqrt(delta)` run the near branch, and anything else moves independently.
//! The near branch advances both chains substep by substep with shared
//! increments and, once their one-substep kernels overlap enough, couples
//! those kernels maximally. Every substep is a coupling of the two substep
//! kernels, so each component is exactly a solo chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{Discretization, Scheme, Stepper};
use crate::noise::NoiseSpec;
use crate::rng::RngStream;
use crate::spectral::{GalerkinModel, SpectralState};
use crate::stats::{linear_fit, LinearFit};

/// When the near branch tries to couple the two substep kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximityRule {
    /// `|x1 - x2| <= rho sqrt(dt) min_n phi_n`, with `phi_n` the smaller of
    /// the two per-mode noise gains.
    #[default]
    MinScale,
    /// `|(m1 - m2) / g| <= rho sqrt(dt)` on the substep means, with `g^2`
    /// the average of the two per-mode gains squared.
    Mahalanobis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingParams {
    /// Macro-step length `T`.
    pub macro_length: f64,
    /// Squared `H2` radius of the near-branch ball.
    pub delta: f64,
    pub dt: f64,
    pub rho: f64,
    pub max_macro_steps: usize,
    /// Squared `L2` radius for `tau_L2`; unset disables it.
    #[serde(default)]
    pub delta3: Option<f64>,
    #[serde(default)]
    pub proximity: ProximityRule,
    #[serde(default)]
    pub scheme: Scheme,
}

impl CouplingParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be positive and finite, got {v}")))
            }
        };
        positive("coupling.T", self.macro_length)?;
        positive("coupling.delta", self.delta)?;
        positive("coupling.dt", self.dt)?;
        positive("coupling.rho", self.rho)?;
        if let Some(d3) = self.delta3 {
            positive("coupling.delta3", d3)?;
        }
        if self.dt > self.macro_length {
            return Err(Error::invalid("coupling.dt", "must not exceed T"));
        }
        if self.max_macro_steps == 0 {
            return Err(Error::invalid("coupling.max_macro_steps", "must be at least 1"));
        }
        self.substeps()?;
        Ok(())
    }

    pub fn discretization(&self) -> Result<Discretization> {
        Discretization::new(self.dt, self.scheme)
    }

    /// Substeps per macro step; `T` must be a multiple of `dt`.
    pub fn substeps(&self) -> Result<usize> {
        self.discretization()?.steps_for(self.macro_length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Synchronous,
    NearMaximal,
    Independent,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Synchronous => "synchronous",
            Branch::NearMaximal => "near_maximal",
            Branch::Independent => "independent",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledDraw {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub met: bool,
}

fn log_density(z: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    -0.5 * z.iter().zip(mean).zip(var).map(|((z, m), v)| (z - m) * (z - m) / v + v.ln()).sum::<f64>()
}

fn check_gaussian(mean: &[f64], var: &[f64], dim: usize) -> Result<()> {
    if mean.len() != dim || var.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: mean.len().max(var.len()) });
    }
    if let Some((mode, &value)) = var.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::DegenerateNoise { mode, value });
    }
    if mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("mean"));
    }
    Ok(())
}

/// Maximal coupling of `N(mean1, diag var1)` and `N(mean2, diag var2)`:
/// `P(z1 = z2) = 1 - TV`.
pub fn maximal_coupling_gaussian(
    mean1: &[f64],
    var1: &[f64],
    mean2: &[f64],
    var2: &[f64],
    stream: &mut RngStream,
) -> Result<CoupledDraw> {
    let dim = mean1.len();
    check_gaussian(mean1, var1, dim)?;
    check_gaussian(mean2, var2, dim)?;
    let mut z = vec![0.0; dim];
    draw_into(mean1, var1, stream, &mut z);
    let u = stream.uniform();
    if u.ln() + log_density(&z, mean1, var1) <= log_density(&z, mean2, var2) {
        return Ok(CoupledDraw { z2: z.clone(), z1: z, met: true });
    }
    let mut w = vec![0.0; dim];
    loop {
        draw_into(mean2, var2, stream, &mut w);
        let u = stream.uniform();
        if u.ln() + log_density(&w, mean2, var2) > log_density(&w, mean1, var1) {
            return Ok(CoupledDraw { z1: z, z2: w, met: false });
        }
    }
}

fn draw_into(mean: &[f64], var: &[f64], stream: &mut RngStream, out: &mut [f64]) {
    for n in 0..out.len() {
        out[n] = mean[n] + var[n].sqrt() * stream.normal();
    }
}

/// Result of one macro step.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroStep {
    pub x1: SpectralState,
    pub x2: SpectralState,
    pub branch: Branch,
    pub met: bool,
    /// Substeps on which the kernels were coupled maximally.
    pub kernel_attempts: usize,
}

/// Shared state for repeated macro steps of one `(model, noise, params)`.
struct Coupler<'a> {
    model: &'a GalerkinModel,
    params: CouplingParams,
    stepper: Stepper<'a>,
    substeps: usize,
    dw1: Vec<f64>,
    dw2: Vec<f64>,
    buf1: Vec<f64>,
    buf2: Vec<f64>,
    gain1: Vec<f64>,
    gain2: Vec<f64>,
}

impl<'a> Coupler<'a> {
    fn new(model: &'a GalerkinModel, noise: &'a NoiseSpec, params: CouplingParams) -> Result<Self> {
        params.validate()?;
        noise.check(model)?;
        noise.ensure_nondegenerate()?;
        let stepper = Stepper::new(model, noise, params.discretization()?)?;
        let dim = model.dim();
        Ok(Coupler {
            model,
            params,
            stepper,
            substeps: params.substeps()?,
            dw1: vec![0.0; dim],
            dw2: vec![0.0; dim],
            buf1: vec![0.0; dim],
            buf2: vec![0.0; dim],
            gain1: vec![0.0; dim],
            gain2: vec![0.0; dim],
        })
    }

    fn in_ball(&self, x: &[f64]) -> bool {
        self.model.h2_sq(x) <= self.params.delta
    }

    fn step_one(&mut self, x: &mut Vec<f64>, which: u8, step: usize) -> Result<()> {
        let dw = if which == 1 { &self.dw1 } else { &self.dw2 };
        if !self.stepper.step_into(x, dw, &mut self.buf1) {
            return Err(Error::BlowUp { step });
        }
        std::mem::swap(x, &mut self.buf1);
        Ok(())
    }

    fn close_enough(&mut self, x1: &[f64], x2: &[f64]) -> bool {
        let dt = self.params.dt;
        self.stepper.noise_gain_into(x1, &mut self.gain1);
        self.stepper.noise_gain_into(x2, &mut self.gain2);
        match self.params.proximity {
            ProximityRule::MinScale => {
                let scale = self.gain1.iter().chain(&self.gain2).copied().fold(f64::INFINITY, f64::min);
                let dist: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                dist <= self.params.rho * dt.sqrt() * scale
            }
            ProximityRule::Mahalanobis => {
                self.stepper.mean_into(x1, &mut self.buf1);
                self.stepper.mean_into(x2, &mut self.buf2);
                let d2: f64 = (0..x1.len())
                    .map(|n| {
                        let d = self.buf1[n] - self.buf2[n];
                        2.0 * d * d / (self.gain1[n] * self.gain1[n] + self.gain2[n] * self.gain2[n])
                    })
                    .sum();
                d2 <= self.params.rho * self.params.rho * dt
            }
        }
    }

    fn macro_step(&mut self, x1: &mut Vec<f64>, x2: &mut Vec<f64>, stream: &mut RngStream) -> Result<(Branch, usize)> {
        let dt = self.params.dt;
        if x1 == x2 {
            for i in 0..self.substeps {
                stream.fill_normal(dt, &mut self.dw1);
                self.step_one(x1, 1, i)?;
            }
            x2.clone_from(x1);
            return Ok((Branch::Synchronous, 0));
        }
        if !(self.in_ball(x1) && self.in_ball(x2)) {
            for i in 0..self.substeps {
                stream.fill_normal(dt, &mut self.dw1);
                stream.fill_normal(dt, &mut self.dw2);
                self.step_one(x1, 1, i)?;
                self.step_one(x2, 2, i)?;
            }
            return Ok((Branch::Independent, 0));
        }
        let mut attempts = 0;
        for i in 0..self.substeps {
            if x1 == x2 {
                stream.fill_normal(dt, &mut self.dw1);
                self.step_one(x1, 1, i)?;
                x2.clone_from(x1);
            } else if self.close_enough(x1, x2) {
                attempts += 1;
                // gains are fresh from close_enough
                let mut m1 = vec![0.0; x1.len()];
                let mut m2 = vec![0.0; x2.len()];
                self.stepper.mean_into(x1, &mut m1);
                self.stepper.mean_into(x2, &mut m2);
                let v1: Vec<f64> = self.gain1.iter().map(|g| g * g * dt).collect();
                let v2: Vec<f64> = self.gain2.iter().map(|g| g * g * dt).collect();
                let draw = maximal_coupling_gaussian(&m1, &v1, &m2, &v2, stream)?;
                if draw.z1.iter().chain(&draw.z2).any(|v| !v.is_finite()) {
                    return Err(Error::BlowUp { step: i });
                }
                *x1 = draw.z1;
                *x2 = draw.z2;
            } else {
                stream.fill_normal(dt, &mut self.dw1);
                self.step_one(x1, 1, i)?;
                self.step_one(x2, 1, i)?;
            }
        }
        Ok((Branch::NearMaximal, attempts))
    }
}

/// One macro step of length `T` of the coupled pair.
pub fn coupled_macro_step(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    params: &CouplingParams,
    x1: &SpectralState,
    x2: &SpectralState,
    stream: &mut RngStream,
) -> Result<MacroStep> {
    model.check(x1)?;
    model.check(x2)?;
    let mut c = Coupler::new(model, noise, *params)?;
    let (mut a, mut b) = (x1.0.clone(), x2.0.clone());
    let (branch, kernel_attempts) = c.macro_step(&mut a, &mut b, stream)?;
    let met = a == b;
    Ok(MacroStep { x1: SpectralState(a), x2: SpectralState(b), branch, met, kernel_attempts })
}

/// One row of the macro-step table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroRow {
    /// Index `n` of the grid time `nT` the row ends at.
    pub step: usize,
    pub time: f64,
    pub branch: Branch,
    /// `|x1 - x2|` at the end of the step.
    pub distance: f64,
    pub met: bool,
    pub kernel_attempts: usize,
}

pub const COUPLING_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingRecord {
    pub schema_version: u32,
    pub macro_length: f64,
    /// States at `nT`, `n = 0..=steps`.
    pub states: Vec<(SpectralState, SpectralState)>,
    pub rows: Vec<MacroRow>,
    /// First `n` with `X1(nT) = X2(nT)`.
    pub meeting_step: Option<usize>,
    /// First `t` in `T N \ {0}` with both states in the `H2` ball.
    pub tau: Option<f64>,
    /// First `t` in `T N \ {0}` with both `|x|^2 <= delta3`.
    pub tau_l2: Option<f64>,
    /// Start times of the near-branch macro steps before meeting.
    pub tau_k: Vec<f64>,
    /// Index into `tau_k` of the attempt that met.
    pub k0: Option<usize>,
    /// Macro step during which a component blew up.
    pub censored: Option<usize>,
    /// Grid times after meeting where the states differed. Zero by construction.
    pub persistence_violations: usize,
}

impl CouplingRecord {
    pub fn met_by(&self, n: usize) -> bool {
        self.meeting_step.is_some_and(|m| m <= n)
    }

    /// Near-branch attempts before (and including) the meeting one.
    pub fn attempts(&self) -> usize {
        self.tau_k.len()
    }

    pub fn is_censored(&self) -> bool {
        self.censored.is_some()
    }
}

/// Runs `max_macro_steps` macro steps from `(x0_1, x0_2)`.
pub fn run_coupled_chain(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    params: &CouplingParams,
    x0_1: &SpectralState,
    x0_2: &SpectralState,
    mut stream: RngStream,
) -> Result<CouplingRecord> {
    model.check(x0_1)?;
    model.check(x0_2)?;
    let mut c = Coupler::new(model, noise, *params)?;
    let t_len = params.macro_length;
    let (mut a, mut b) = (x0_1.0.clone(), x0_2.0.clone());
    let mut rec = CouplingRecord {
        schema_version: COUPLING_SCHEMA_VERSION,
        macro_length: t_len,
        states: vec![(x0_1.clone(), x0_2.clone())],
        rows: Vec::with_capacity(params.max_macro_steps),
        meeting_step: (a == b).then_some(0),
        tau: None,
        tau_l2: None,
        tau_k: Vec::new(),
        k0: None,
        censored: None,
        persistence_violations: 0,
    };
    let l2_in = |x: &[f64], d3: Option<f64>| d3.is_some_and(|d| x.iter().map(|v| v * v).sum::<f64>() <= d);

    for n in 0..params.max_macro_steps {
        let start = n as f64 * t_len;
        let attempt = rec.meeting_step.is_none() && c.in_ball(&a) && c.in_ball(&b);
        if attempt {
            rec.tau_k.push(start);
        }
        let (branch, kernel_attempts) = match c.macro_step(&mut a, &mut b, &mut stream) {
            Ok(out) => out,
            Err(Error::BlowUp { .. }) => {
                rec.censored = Some(n);
                return Ok(rec);
            }
            Err(e) => return Err(e),
        };
        let step = n + 1;
        let time = step as f64 * t_len;
        let met = a == b;
        if rec.meeting_step.is_some() && !met {
            rec.persistence_violations += 1;
        }
        if met && rec.meeting_step.is_none() {
            rec.meeting_step = Some(step);
            if attempt {
                rec.k0 = Some(rec.tau_k.len() - 1);
            }
        }
        if rec.tau.is_none() && c.in_ball(&a) && c.in_ball(&b) {
            rec.tau = Some(time);
        }
        if rec.tau_l2.is_none() && l2_in(&a, params.delta3) && l2_in(&b, params.delta3) {
            rec.tau_l2 = Some(time);
        }
        let distance = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        rec.rows.push(MacroRow { step, time, branch, distance, met, kernel_attempts });
        rec.states.push((SpectralState(a.clone()), SpectralState(b.clone())));
    }
    Ok(rec)
}

/// `E[e^{alpha tau}]` for one `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialMoment {
    pub alpha: f64,
    pub mean: f64,
    pub se: f64,
    /// Largest relative gap between the running mean at `n/8, n/4, n/2`
    /// and the full mean.
    pub running_spread: f64,
    /// Set when `alpha` reaches the fitted tail rate or the running mean
    /// is unstable.
    pub divergent: bool,
}

/// Log-linear fit of the survival function `P(tau > t) ~ e^{-rate t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub rate: f64,
    pub fit: Option<LinearFit>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnTimeStats {
    pub n: usize,
    pub censored: usize,
    pub mean_tau: f64,
    pub moments: Vec<ExponentialMoment>,
    pub tail: TailFit,
    /// `(t, P(tau > t))` on the grid.
    pub survival: Vec<(f64, f64)>,
}

pub const MIN_RETURN_SAMPLES: usize = 30;
/// Survival points with fewer survivors than this are left out of the tail fit.
pub const TAIL_MIN_SURVIVORS: usize = 5;
pub const CAUCHY_TOLERANCE: f64 = 0.5;

/// Return-time statistics over the un-censored records.
pub fn return_time_stats(records: &[CouplingRecord], alphas: &[f64]) -> Result<ReturnTimeStats> {
    let first = records.first().ok_or(Error::InsufficientData { needed: MIN_RETURN_SAMPLES, got: 0 })?;
    let taus: Vec<Option<f64>> = records.iter().map(|r| if r.is_censored() { None } else { r.tau }).collect();
    return_time_stats_from_samples(&taus, first.macro_length, alphas)
}

/// As [`return_time_stats`] on raw samples; `None` marks a censored `tau`.
pub fn return_time_stats_from_samples(taus: &[Option<f64>], macro_length: f64, alphas: &[f64]) -> Result<ReturnTimeStats> {
    let ok: Vec<f64> = taus.iter().flatten().copied().collect();
    let censored = taus.len() - ok.len();
    if ok.len() < MIN_RETURN_SAMPLES {
        return Err(Error::InsufficientData { needed: MIN_RETURN_SAMPLES, got: ok.len() });
    }
    if !(macro_length > 0.0) {
        return Err(Error::invalid("macro_length", "must be positive"));
    }
    let n = ok.len();
    let max_steps = ok.iter().map(|t| (t / macro_length).round() as usize).max().unwrap_or(0);
    let mut survival = Vec::with_capacity(max_steps + 1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..=max_steps {
        let t = k as f64 * macro_length;
        let above = ok.iter().filter(|&&v| v > t + 1e-9 * macro_length).count();
        survival.push((t, above as f64 / n as f64));
        if k >= 1 && above >= TAIL_MIN_SURVIVORS {
            xs.push(t);
            ys.push((above as f64 / n as f64).ln());
        }
    }
    let tail = if xs.len() >= 2 {
        let fit = linear_fit(&xs, &ys)?;
        TailFit { rate: -fit.slope, fit: Some(fit), points: xs.len() }
    } else {
        // at most one usable point: use the first step's survival, floored at 1/n
        let s1 = survival.get(1).map_or(0.0, |p| p.1).max(1.0 / n as f64);
        TailFit { rate: -s1.ln() / macro_length, fit: None, points: xs.len() }
    };

    let moments = alphas
        .iter()
        .map(|&alpha| {
            let values: Vec<f64> = ok.iter().map(|t| (alpha * t).exp()).collect();
            let acc: crate::stats::MeanVar = values.iter().copied().collect();
            let mean = acc.mean();
            let running_spread = [8usize, 4, 2]
                .iter()
                .map(|d| {
                    let m = (n / d).max(1);
                    let partial = values[..m].iter().sum::<f64>() / m as f64;
                    ((partial - mean) / mean).abs()
                })
                .fold(0.0, f64::max);
            let divergent = alpha >= tail.rate || running_spread > CAUCHY_TOLERANCE || !mean.is_finite();
            ExponentialMoment { alpha, mean, se: acc.std_err(), running_spread, divergent }
        })
        .collect();

    Ok(ReturnTimeStats { n, censored, mean_tau: ok.iter().sum::<f64>() / n as f64, moments, tail, survival })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{build_shell_model, build_shell_model_with};
    use crate::stats::normal_cdf;

    fn overlap_1d(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
        // midpoint rule on a wide grid
        let pdf = |x: f64, m: f64, s: f64| (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let (lo, hi, n) = (-30.0, 30.0, 600_000);
        let h = (hi - lo) / n as f64;
        (0..n).map(|i| lo + (i as f64 + 0.5) * h).map(|x| pdf(x, m1, s1).min(pdf(x, m2, s2)) * h).sum()
    }

    fn meet_rate(m1: f64, v1: f64, m2: f64, v2: f64, n: usize, seed: u64) -> (f64, Vec<f64>, Vec<f64>) {
        let mut s = RngStream::new(seed, 0);
        let mut met = 0;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let d = maximal_coupling_gaussian(&[m1], &[v1], &[m2], &[v2], &mut s).unwrap();
            met += d.met as usize;
            a.push(d.z1[0]);
            b.push(d.z2[0]);
        }
        (met as f64 / n as f64, a, b)
    }

    #[test]
    fn maximal_coupling_meet_rates() {
        let (r, _, _) = meet_rate(0.0, 1.0, 1.0, 1.0, 100_000, 1);
        let exact = 2.0 * normal_cdf(-0.5);
        assert!((exact - 0.6171).abs() < 1e-4);
        assert!((r - exact).abs() < 0.01, "{r}");
        let (r, _, _) = meet_rate(0.0, 1.0, 0.0, 4.0, 100_000, 2);
        let exact = overlap_1d(0.0, 1.0, 0.0, 2.0);
        assert!((r - exact).abs() < 0.01, "{r} vs {exact}");
        let (r, _, _) = meet_rate(0.3, 0.5, 0.3, 0.5, 1000, 3);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn maximal_coupling_keeps_marginals() {
        let (_, a, b) = meet_rate(0.0, 1.0, 1.5, 2.0, 20_000, 4);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        assert!(mean(&a).abs() < 0.03 && (var(&a) - 1.0).abs() < 0.05);
        assert!((mean(&b) - 1.5).abs() < 0.04 && (var(&b) - 2.0).abs() < 0.1);
    }

    #[test]
    fn maximal_coupling_rejects_bad_covariance() {
        let mut s = RngStream::new(0, 0);
        assert!(maximal_coupling_gaussian(&[0.0], &[0.0], &[0.0], &[1.0], &mut s).is_err());
        assert!(maximal_coupling_gaussian(&[0.0], &[1.0], &[0.0, 1.0], &[1.0, 1.0], &mut s).is_err());
    }

    fn params() -> CouplingParams {
        CouplingParams {
            macro_length: 0.05,
            delta: 1e-3,
            dt: 1e-3,
            rho: 2.0,
            max_macro_steps: 5,
            delta3: Some(1e-6),
            proximity: ProximityRule::Mahalanobis,
            scheme: Scheme::SemiImplicit,
        }
    }

    #[test]
    fn params_validation() {
        let mut p = params();
        assert!(p.validate().is_ok());
        p.dt = 0.1;
        assert!(p.validate().is_err());
        let mut p = params();
        p.dt = 0.003;
        assert!(p.validate().is_err(), "T not a multiple of dt");
        let mut p = params();
        p.rho = 0.0;
        assert!(p.validate().is_err());
        let mut p = params();
        p.max_macro_steps = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn equal_states_move_together() {
        let model = build_shell_model(4, 1.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let x = SpectralState(vec![0.5, -0.2, 0.01, 0.0]);
        let out = coupled_macro_step(&model, &noise, &params(), &x, &x, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(out.branch, Branch::Synchronous);
        assert!(out.met);
        assert_eq!(out.x1.0, out.x2.0);
        let rec = run_coupled_chain(&model, &noise, &params(), &x, &x, RngStream::new(1, 1)).unwrap();
        assert_eq!(rec.meeting_step, Some(0));
        assert!(rec.rows.iter().all(|r| r.branch == Branch::Synchronous && r.met));
        assert!(rec.tau_k.is_empty());
        assert_eq!(rec.persistence_violations, 0);
    }

    #[test]
    fn far_states_move_independently() {
        let model = build_shell_model(3, 0.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let x1 = SpectralState(vec![1.0, 0.0, 0.0]);
        let x2 = SpectralState(vec![-1.0, 0.0, 0.0]);
        let p = params();
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let n = 1000;
        for k in 0..n {
            let out = coupled_macro_step(&model, &noise, &p, &x1, &x2, &mut RngStream::new(5, k)).unwrap();
            assert_eq!(out.branch, Branch::Independent);
            let (a, b) = (out.x1[1], out.x2[1]);
            sa += a;
            sb += b;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        let nf = n as f64;
        let cov = sab / nf - sa * sb / nf / nf;
        let corr = cov / ((saa / nf - (sa / nf).powi(2)) * (sbb / nf - (sb / nf).powi(2))).sqrt();
        assert!(corr.abs() < 0.1, "{corr}");
    }

    #[test]
    fn meets_more_often_in_smaller_balls() {
        let model = build_shell_model_with(3, 1.0, 1.0, 2.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let mut p = params();
        p.macro_length = 1.0;
        p.delta = 1.0;
        p.rho = 3.0;
        let mut rates = Vec::new();
        for scale in [0.12, 0.07, 0.03] {
            let mut met = 0;
            for k in 0..1000 {
                let x1 = SpectralState(vec![scale, 0.0, 0.0]);
                let x2 = SpectralState(vec![-scale, 0.0, 0.0]);
                let out = coupled_macro_step(&model, &noise, &p, &x1, &x2, &mut RngStream::new(6, k)).unwrap();
                assert_eq!(out.branch, Branch::NearMaximal);
                met += out.met as usize;
            }
            rates.push(met as f64 / 1000.0);
        }
        assert!(rates[0] > 0.0 && rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
    }

    #[test]
    fn tau_follows_deterministic_decay() {
        // mode-1 data without coupling decays as e^{-2 mu_1 t} in the H2 norm
        let model = build_shell_model_with(3, 0.0, 1.0, 2.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap().scaled(1e-8).unwrap();
        let mut p = params();
        p.macro_length = 0.1;
        p.delta = 1e-2;
        p.max_macro_steps = 40;
        let x1 = SpectralState(vec![1.0, 0.0, 0.0]);
        let x2 = SpectralState(vec![0.5, 0.0, 0.0]);
        let rec = run_coupled_chain(&model, &noise, &p, &x1, &x2, RngStream::new(2, 0)).unwrap();
        // semi-implicit decay per substep is e^{-mu dt}, exact for this flow
        let t_star = (1.0f64 / p.delta).ln() / 2.0;
        let expected = (t_star / p.macro_length).ceil() * p.macro_length;
        assert!((rec.tau.unwrap() - expected).abs() < 1e-9, "{:?} vs {expected}", rec.tau);
    }

    #[test]
    fn record_bookkeeping() {
        let model = build_shell_model_with(3, 1.0, 1.0, 2.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let mut p = params();
        p.macro_length = 0.2;
        p.delta = 1.0;
        p.max_macro_steps = 10;
        let x1 = SpectralState(vec![0.05, 0.0, 0.0]);
        let x2 = SpectralState(vec![-0.05, 0.0, 0.0]);
        let mut seen_k0 = false;
        for k in 0..50 {
            let rec = run_coupled_chain(&model, &noise, &p, &x1, &x2, RngStream::new(7, k)).unwrap();
            assert_eq!(rec.states.len(), 11);
            assert_eq!(rec.tau_k.first(), Some(&0.0));
            if let Some(m) = rec.meeting_step {
                for r in &rec.rows[m - 1..] {
                    assert!(r.met && r.distance == 0.0);
                }
                let k0 = rec.k0.unwrap();
                assert_eq!(k0 + 1, rec.tau_k.len());
                seen_k0 = true;
            }
            assert_eq!(rec.persistence_violations, 0);
        }
        assert!(seen_k0);
    }

    #[test]
    fn return_time_constant_and_geometric() {
        let taus = vec![Some(0.5); 40];
        let st = return_time_stats_from_samples(&taus, 0.5, &[0.3, 1.0]).unwrap();
        assert_eq!(st.moments[0].mean, (0.15f64).exp());
        assert_eq!(st.moments[1].mean, (0.5f64).exp());
        assert!(return_time_stats_from_samples(&taus[..10], 0.5, &[0.3]).is_err());

        // P(tau = kT) = (3/4)(1/4)^{k-1}; E[e^{alpha tau}] < inf iff e^{alpha T} < 4
        let t = 1.0;
        let mut s = RngStream::new(11, 0);
        let taus: Vec<Option<f64>> = (0..20_000)
            .map(|_| {
                let mut k = 1;
                while s.uniform() < 0.25 {
                    k += 1;
                }
                Some(k as f64 * t)
            })
            .collect();
        let grid = [1.5f64, 2.0, 2.5, 6.0, 10.0];
        let alphas: Vec<f64> = grid.iter().map(|g| g.ln() / t).collect();
        let st = return_time_stats_from_samples(&taus, t, &alphas).unwrap();
        let flags: Vec<bool> = st.moments.iter().map(|m| m.divergent).collect();
        assert_eq!(flags, vec![false, false, false, true, true], "{:?}", st.moments);
        assert!((st.tail.rate - 4f64.ln()).abs() < 0.1);
        // closed form at e^{alpha T} = 1.5: 0.75 g / (1 - 0.25 g)
        let g = 1.5;
        let exact = 0.75 * g / (1.0 - 0.25 * g);
        assert!((st.moments[0].mean - exact).abs() < 3.0 * st.moments[0].se);
    }
}
