//! Time stepping of the Galerkin SDE
//! `dX + nu A X dt + B(X) dt = phi(X) dW + f dt`,
//! trajectory records with their driving increments, and the path
//! functionals built on top of them (H1 energy, stopping time, Y + Z split).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{stochastic_convolution, NoiseSpec};
use crate::rng::RngStream;
use crate::spectral::{GalerkinModel, SpectralState};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    /// Linear part integrated exactly per mode, left-point nonlinearity and noise.
    #[default]
    SemiImplicit,
}

/// Time step and scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub dt: f64,
    pub scheme: Scheme,
}

impl Discretization {
    pub fn new(dt: f64, scheme: Scheme) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        Ok(Discretization { dt, scheme })
    }

    /// `dt = min(1e-3, 0.1 / (nu mu_max))` with the semi-implicit scheme.
    pub fn default_for(model: &GalerkinModel) -> Self {
        let mu_max = model.eigenvalues().iter().cloned().fold(0.0, f64::max);
        Discretization { dt: default_dt(model.viscosity(), mu_max), scheme: Scheme::SemiImplicit }
    }

    /// Number of steps reaching at least `horizon`.
    pub fn steps_covering(&self, horizon: f64) -> Result<usize> {
        if !(horizon.is_finite() && horizon >= self.dt) {
            return Err(Error::invalid("horizon", format!("must be at least dt = {}, got {horizon}", self.dt)));
        }
        Ok((horizon / self.dt - 1e-9).ceil() as usize)
    }

    /// Number of steps to cover `horizon`, which must be a multiple of `dt`.
    pub fn steps_for(&self, horizon: f64) -> Result<usize> {
        if !(horizon.is_finite() && horizon >= self.dt) {
            return Err(Error::invalid("horizon", format!("must be at least dt = {}, got {horizon}", self.dt)));
        }
        let n = (horizon / self.dt).round();
        if (n * self.dt - horizon).abs() > 1e-9 * horizon {
            return Err(Error::OffGrid { time: horizon, dt: self.dt });
        }
        Ok(n as usize)
    }
}

pub fn default_dt(viscosity: f64, mu_max: f64) -> f64 {
    1e-3_f64.min(0.1 / (viscosity * mu_max))
}

/// Gaussian increments `dW_n ~ N(0, dt)` for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseIncrement {
    pub values: Vec<f64>,
    pub dt: f64,
}

impl NoiseIncrement {
    pub fn zeros(dim: usize, dt: f64) -> Self {
        NoiseIncrement { values: vec![0.0; dim], dt }
    }

    pub fn draw(dim: usize, dt: f64, rng: &mut RngStream) -> Self {
        let mut values = vec![0.0; dim];
        rng.fill_normal(dt, &mut values);
        NoiseIncrement { values, dt }
    }
}

/// Sums consecutive groups of `factor` increments: the same Brownian path
/// sampled on a grid `factor` times coarser.
pub fn coarsen_increments(increments: &[NoiseIncrement], factor: usize) -> Vec<NoiseIncrement> {
    increments
        .chunks_exact(factor)
        .map(|chunk| {
            let mut values = vec![0.0; chunk[0].values.len()];
            for inc in chunk {
                for (v, w) in values.iter_mut().zip(&inc.values) {
                    *v += w;
                }
            }
            NoiseIncrement { values, dt: chunk[0].dt * factor as f64 }
        })
        .collect()
}

/// A simulated path: states on the grid `t_i = i dt` and the increments that
/// drove each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub dt: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub stream: u64,
    pub times: Vec<f64>,
    pub states: Vec<SpectralState>,
    #[serde(default)]
    pub increments: Vec<NoiseIncrement>,
    /// Step at which the path left the finite range; the record is truncated
    /// at the last finite state.
    pub blown_up: Option<usize>,
}

impl TrajectoryRecord {
    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn last_state(&self) -> &SpectralState {
        self.states.last().expect("trajectory has at least its initial state")
    }

    pub fn require_increments(&self) -> Result<()> {
        if self.increments.len() + 1 != self.states.len() {
            return Err(Error::MissingIncrements);
        }
        Ok(())
    }

    /// Grid index of time `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let i = (t / self.dt).round();
        if i < 0.0 || (i * self.dt - t).abs() > 1e-9 * self.dt.max(t.abs()) || i as usize >= self.states.len() {
            return Err(Error::OffGrid { time: t, dt: self.dt });
        }
        Ok(i as usize)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: TrajectoryRecord = serde_json::from_str(text)?;
        if rec.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported trajectory schema version {}", rec.schema_version)));
        }
        Ok(rec)
    }
}

/// One-step map of the chosen scheme with precomputed decay factors.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    model: &'a GalerkinModel,
    noise: &'a NoiseSpec,
    disc: Discretization,
    decay: Vec<f64>,
    phi: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a GalerkinModel, noise: &'a NoiseSpec, disc: Discretization) -> Result<Self> {
        noise.check(model)?;
        Discretization::new(disc.dt, disc.scheme)?;
        let nu = model.viscosity();
        let decay = model.eigenvalues().iter().map(|mu| (-nu * mu * disc.dt).exp()).collect();
        Ok(Stepper { model, noise, disc, decay, phi: vec![0.0; model.dim()] })
    }

    pub fn model(&self) -> &'a GalerkinModel {
        self.model
    }

    pub fn noise(&self) -> &'a NoiseSpec {
        self.noise
    }

    pub fn discretization(&self) -> Discretization {
        self.disc
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Per-mode factor `e^{-nu mu_n dt}`.
    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    /// Deterministic part of one step (the conditional mean).
    pub fn mean_into(&self, x: &[f64], out: &mut [f64]) {
        let dt = self.disc.dt;
        let f = self.model.forcing().as_slice();
        out.iter_mut().for_each(|o| *o = 0.0);
        self.model.bilinear_into(x, x, out);
        match self.disc.scheme {
            Scheme::SemiImplicit => {
                for n in 0..out.len() {
                    out[n] = self.decay[n] * (x[n] + dt * (f[n] - out[n]));
                }
            }
            Scheme::EulerMaruyama => {
                let nu = self.model.viscosity();
                let mu = self.model.eigenvalues();
                for n in 0..out.len() {
                    out[n] = x[n] + dt * (-nu * mu[n] * x[n] - out[n] + f[n]);
                }
            }
        }
    }

    /// Per-mode gain applied to `dW_n`: `e^{-nu mu_n dt} phi_n(x)` (semi-implicit)
    /// or `phi_n(x)` (Euler).
    pub fn noise_gain_into(&self, x: &[f64], out: &mut [f64]) {
        self.noise.phi_into(x, out);
        if self.disc.scheme == Scheme::SemiImplicit {
            for (o, d) in out.iter_mut().zip(&self.decay) {
                *o *= d;
            }
        }
    }

    /// `out = step(x, dw)`. Returns `false` when the result is not finite.
    pub fn step_into(&mut self, x: &[f64], dw: &[f64], out: &mut [f64]) -> bool {
        self.mean_into(x, out);
        let mut phi = std::mem::take(&mut self.phi);
        self.noise_gain_into(x, &mut phi);
        let mut finite = true;
        for n in 0..out.len() {
            out[n] += phi[n] * dw[n];
            finite &= out[n].is_finite();
        }
        self.phi = phi;
        finite
    }
}

/// One step of the scheme from `x` driven by `dw`.
pub fn step(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    scheme: Scheme,
    x: &SpectralState,
    dt: f64,
    dw: &NoiseIncrement,
) -> Result<SpectralState> {
    model.check(x)?;
    if dw.values.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), found: dw.values.len() });
    }
    let mut stepper = Stepper::new(model, noise, Discretization::new(dt, scheme)?)?;
    let mut out = model.zero_state();
    if !stepper.step_into(x.as_slice(), &dw.values, &mut out.0) {
        return Err(Error::BlowUp { step: 0 });
    }
    Ok(out)
}

/// Simulates `x0` over `horizon` with increments drawn from `stream`.
pub fn simulate_path(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    x0: &SpectralState,
    horizon: f64,
    disc: Discretization,
    mut stream: RngStream,
) -> Result<TrajectoryRecord> {
    let n_steps = disc.steps_covering(horizon)?;
    let dim = model.dim();
    let increments = (0..n_steps).map(|_| NoiseIncrement::draw(dim, disc.dt, &mut stream)).collect();
    let mut rec = simulate_driven(model, noise, x0, disc, increments)?;
    rec.seed = stream.seed();
    rec.stream = stream.stream();
    Ok(rec)
}

/// Simulates `x0` driven by the given increments (one step per increment).
pub fn simulate_driven(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    x0: &SpectralState,
    disc: Discretization,
    mut increments: Vec<NoiseIncrement>,
) -> Result<TrajectoryRecord> {
    model.check(x0)?;
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial state"));
    }
    let mut stepper = Stepper::new(model, noise, disc)?;
    let mut states = Vec::with_capacity(increments.len() + 1);
    states.push(x0.clone());
    let mut blown_up = None;
    for (i, inc) in increments.iter().enumerate() {
        if inc.values.len() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), found: inc.values.len() });
        }
        let mut next = model.zero_state();
        if !stepper.step_into(states[i].as_slice(), &inc.values, &mut next.0) {
            blown_up = Some(i + 1);
            break;
        }
        states.push(next);
    }
    increments.truncate(states.len() - 1);
    let times = (0..states.len()).map(|i| i as f64 * disc.dt).collect();
    Ok(TrajectoryRecord {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        dt: disc.dt,
        scheme: disc.scheme,
        seed: 0,
        stream: 0,
        times,
        states,
        increments,
        blown_up,
    })
}

/// Advances `x` in place by `n_steps` without recording; `None` on blow-up.
pub fn advance(stepper: &mut Stepper<'_>, x: &mut SpectralState, n_steps: usize, rng: &mut RngStream) -> Option<()> {
    let dim = stepper.dim();
    let dt = stepper.discretization().dt;
    let mut dw = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    for _ in 0..n_steps {
        rng.fill_normal(dt, &mut dw);
        if !stepper.step_into(x.as_slice(), &dw, &mut next) {
            return None;
        }
        x.0.copy_from_slice(&next);
    }
    Some(())
}

/// Trapezoidal running integral of `values` on a uniform grid; `out[0] = 0`.
pub(crate) fn cumulative_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * dt * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// `||X(t)||_1^2 + int_0^t ||X(s)||_2^2 ds`, trapezoidal in time.
pub fn h1_energy(model: &GalerkinModel, trajectory: &TrajectoryRecord, t: f64) -> Result<f64> {
    let i = trajectory.index_of(t)?;
    let h2: Vec<f64> = trajectory.states[..=i].iter().map(|x| model.h2_sq(x.as_slice())).collect();
    let integral = cumulative_trapezoid(&h2, trajectory.dt)[i];
    Ok(model.sobolev_norm_sq_unchecked(1.0, trajectory.states[i].as_slice()) + integral)
}

/// First grid time at which `int_0^t ||X||_2^2` reaches `k0 + 1`, or `horizon`.
pub fn sigma_stop(model: &GalerkinModel, trajectory: &TrajectoryRecord, k0: f64, horizon: f64) -> Result<f64> {
    let last = trajectory.index_of(horizon)?;
    let h2: Vec<f64> = trajectory.states[..=last].iter().map(|x| model.h2_sq(x.as_slice())).collect();
    let integral = cumulative_trapezoid(&h2, trajectory.dt);
    Ok(integral
        .iter()
        .position(|&v| v >= k0 + 1.0)
        .map_or(horizon, |i| trajectory.times[i]))
}

/// `X = Y + Z` with `Z` the stochastic convolution; `y_reintegrated` solves
/// `dY/dt + nu A Y + B(Y + Z) = f` independently with an exponential
/// trapezoidal (Heun) scheme on the same grid.
#[derive(Debug, Clone)]
pub struct YzDecomposition {
    pub z: Vec<SpectralState>,
    pub y: Vec<SpectralState>,
    pub y_reintegrated: Vec<SpectralState>,
    /// `max_t |(X - Z)(t) - Y_reintegrated(t)|`
    pub defect: f64,
}

pub fn decompose_yz(model: &GalerkinModel, noise: &NoiseSpec, trajectory: &TrajectoryRecord) -> Result<YzDecomposition> {
    let z = stochastic_convolution(model, noise, trajectory)?;
    let y: Vec<SpectralState> = trajectory.states.iter().zip(&z).map(|(x, z)| x.sub(z)).collect();
    let dt = trajectory.dt;
    let dim = model.dim();
    let nu = model.viscosity();
    let decay: Vec<f64> = model.eigenvalues().iter().map(|mu| (-nu * mu * dt).exp()).collect();
    let f = model.forcing().as_slice();
    // g(Y, Z) = f - B(Y + Z)
    let g = |yv: &[f64], zv: &[f64], out: &mut [f64]| {
        let u: Vec<f64> = yv.iter().zip(zv).map(|(a, b)| a + b).collect();
        out.iter_mut().zip(f).for_each(|(o, f)| *o = *f);
        let mut b = vec![0.0; dim];
        model.bilinear_into(&u, &u, &mut b);
        out.iter_mut().zip(&b).for_each(|(o, b)| *o -= b);
    };
    let mut yr = Vec::with_capacity(y.len());
    yr.push(y[0].clone());
    let mut g0 = vec![0.0; dim];
    let mut g1 = vec![0.0; dim];
    let mut pred = vec![0.0; dim];
    for i in 0..y.len() - 1 {
        let cur = yr[i].as_slice();
        g(cur, z[i].as_slice(), &mut g0);
        for n in 0..dim {
            pred[n] = decay[n] * (cur[n] + dt * g0[n]);
        }
        g(&pred, z[i + 1].as_slice(), &mut g1);
        let next: Vec<f64> =
            (0..dim).map(|n| decay[n] * cur[n] + 0.5 * dt * (decay[n] * g0[n] + g1[n])).collect();
        yr.push(SpectralState(next));
    }
    let defect = y
        .iter()
        .zip(&yr)
        .map(|(a, b)| a.sub(b).norm_sq().sqrt())
        .fold(0.0, f64::max);
    Ok(YzDecomposition { z, y, y_reintegrated: yr, defect })
}
