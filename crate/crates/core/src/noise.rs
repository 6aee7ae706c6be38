//! Diagonal, non-degenerate, possibly state-dependent noise
//! `phi(x) dW = sum_n phi_n(x) e_n dW_n`.
//!
//! Two concrete families are provided:
//!
//! * `ConstantDiagonal`: `phi_n = b_n`, with `b_n = mu_n^{-s/2}` by default;
//! * `ModulatedDiagonal`: `phi_n(x) = b_n (1 + a sin((x, e_1)))` with
//!   `0 <= a < 1`, strictly positive, smooth and with bounded derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::TrajectoryRecord;
use crate::spectral::{GalerkinModel, SpectralState};

/// Values of `phi_n(x)` at or below this are treated as degenerate.
pub const PHI_UNDERFLOW: f64 = 1e-300;

/// Default amplitude of the state modulation.
pub const DEFAULT_MODULATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    ConstantDiagonal,
    ModulatedDiagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    kind: NoiseKind,
    decay_exponent: f64,
    base_amplitudes: Vec<f64>,
    modulation: f64,
    epsilon: f64,
}

/// Summability constants of the noise, reported as diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDiagnostics {
    pub epsilon: f64,
    /// `sum_n sup_x phi_n(x)^2 mu_n^{1+eps}`
    pub kappa0: f64,
    /// `sup_{x, eta} sum_n |phi_n'(x).eta|^2 mu_n^2 / ||eta||_2^2`
    pub kappa1: f64,
    /// `sup_x |phi(x)^{-1}|^2` as an operator from `H_3` to `H`
    pub kappa2: f64,
}

fn check_exponent(s: f64) -> Result<()> {
    if !(s > 2.5 && s <= 3.0) {
        return Err(Error::invalid("noise.s", format!("decay exponent must lie in (5/2, 3], got {s}")));
    }
    Ok(())
}

/// Default `eps = (3 - s) + 0.1`, clipped to `(0, 1/2]`.
fn default_epsilon(s: f64) -> f64 {
    ((3.0 - s) + 0.1).clamp(f64::MIN_POSITIVE, 0.5)
}

impl NoiseSpec {
    pub fn constant_diagonal(model: &GalerkinModel, s: f64) -> Result<Self> {
        check_exponent(s)?;
        Ok(NoiseSpec {
            kind: NoiseKind::ConstantDiagonal,
            decay_exponent: s,
            base_amplitudes: model.eigenvalues().iter().map(|mu| mu.powf(-s / 2.0)).collect(),
            modulation: 0.0,
            epsilon: default_epsilon(s),
        })
    }

    pub fn modulated_diagonal(model: &GalerkinModel, s: f64, modulation: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&modulation) {
            return Err(Error::invalid("noise.modulation", format!("must lie in [0, 1), got {modulation}")));
        }
        let mut spec = Self::constant_diagonal(model, s)?;
        spec.kind = NoiseKind::ModulatedDiagonal;
        spec.modulation = modulation;
        Ok(spec)
    }

    /// Explicit amplitudes `b_n`; zero amplitudes are accepted here so that
    /// degenerate configurations can be represented and rejected downstream.
    pub fn with_amplitudes(kind: NoiseKind, s: f64, amplitudes: Vec<f64>, modulation: f64) -> Result<Self> {
        if amplitudes.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid("noise.amplitudes", "must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&modulation) {
            return Err(Error::invalid("noise.modulation", format!("must lie in [0, 1), got {modulation}")));
        }
        let modulation = if kind == NoiseKind::ConstantDiagonal { 0.0 } else { modulation };
        Ok(NoiseSpec {
            kind,
            decay_exponent: s,
            base_amplitudes: amplitudes,
            modulation,
            epsilon: default_epsilon(s.clamp(2.5, 3.0)),
        })
    }

    /// Multiplies every `b_n` by `factor`.
    pub fn scaled(mut self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::invalid("noise.amplitude", format!("scale must be nonnegative, got {factor}")));
        }
        for b in &mut self.base_amplitudes {
            *b *= factor;
        }
        Ok(self)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn decay_exponent(&self) -> f64 {
        self.decay_exponent
    }

    pub fn base_amplitudes(&self) -> &[f64] {
        &self.base_amplitudes
    }

    pub fn modulation_amplitude(&self) -> f64 {
        self.modulation
    }

    pub fn dim(&self) -> usize {
        self.base_amplitudes.len()
    }

    pub fn is_state_dependent(&self) -> bool {
        self.kind == NoiseKind::ModulatedDiagonal && self.modulation != 0.0
    }

    /// Fails when some `phi_n` can reach zero.
    pub fn ensure_nondegenerate(&self) -> Result<()> {
        let floor = 1.0 - self.modulation;
        for (mode, b) in self.base_amplitudes.iter().enumerate() {
            if b * floor <= PHI_UNDERFLOW {
                return Err(Error::DegenerateNoise { mode, value: b * floor });
            }
        }
        Ok(())
    }

    pub(crate) fn check(&self, model: &GalerkinModel) -> Result<()> {
        if self.dim() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), found: self.dim() });
        }
        Ok(())
    }

    /// Scalar state modulation `m(x)`, identically 1 for constant noise.
    pub fn modulation_factor(&self, x: &[f64]) -> f64 {
        match self.kind {
            NoiseKind::ConstantDiagonal => 1.0,
            NoiseKind::ModulatedDiagonal => 1.0 + self.modulation * x[0].sin(),
        }
    }

    /// Directional derivative `m'(x).eta`.
    pub fn modulation_derivative(&self, x: &[f64], eta: &[f64]) -> f64 {
        match self.kind {
            NoiseKind::ConstantDiagonal => 0.0,
            NoiseKind::ModulatedDiagonal => self.modulation * x[0].cos() * eta[0],
        }
    }

    /// `phi_n(x)` for every mode, written into `out`.
    pub(crate) fn phi_into(&self, x: &[f64], out: &mut [f64]) {
        let m = self.modulation_factor(x);
        for (o, b) in out.iter_mut().zip(&self.base_amplitudes) {
            *o = b * m;
        }
    }

    pub fn phi(&self, model: &GalerkinModel, x: &SpectralState) -> Result<Vec<f64>> {
        self.check(model)?;
        model.check(x)?;
        let mut out = vec![0.0; self.dim()];
        self.phi_into(x.as_slice(), &mut out);
        Ok(out)
    }

    /// `phi(x) w`: coefficient `n` is `phi_n(x) w_n`.
    pub fn apply_phi(&self, model: &GalerkinModel, x: &SpectralState, w: &[f64]) -> Result<SpectralState> {
        self.check(model)?;
        model.check(x)?;
        check_len(model, w.len())?;
        let m = self.modulation_factor(x.as_slice());
        Ok(SpectralState(self.base_amplitudes.iter().zip(w).map(|(b, w)| b * m * w).collect()))
    }

    /// `phi(x)^{-1} h`: component `n` is `h_n / phi_n(x)`.
    pub fn apply_phi_inverse(&self, model: &GalerkinModel, x: &SpectralState, h: &SpectralState) -> Result<Vec<f64>> {
        self.check(model)?;
        model.check(x)?;
        model.check(h)?;
        let mut out = vec![0.0; self.dim()];
        self.phi_inverse_into(x.as_slice(), h.as_slice(), &mut out)?;
        Ok(out)
    }

    pub(crate) fn phi_inverse_into(&self, x: &[f64], h: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.modulation_factor(x);
        for (mode, ((o, b), hn)) in out.iter_mut().zip(&self.base_amplitudes).zip(h).enumerate() {
            let phi = b * m;
            if phi <= PHI_UNDERFLOW {
                return Err(Error::DegenerateNoise { mode, value: phi });
            }
            *o = hn / phi;
        }
        Ok(())
    }

    /// `(phi'(x).eta) w`: coefficient `n` is `(phi_n'(x).eta) w_n`.
    pub fn apply_phi_derivative(
        &self,
        model: &GalerkinModel,
        x: &SpectralState,
        eta: &SpectralState,
        w: &[f64],
    ) -> Result<SpectralState> {
        self.check(model)?;
        model.check(x)?;
        model.check(eta)?;
        check_len(model, w.len())?;
        let dm = self.modulation_derivative(x.as_slice(), eta.as_slice());
        Ok(SpectralState(self.base_amplitudes.iter().zip(w).map(|(b, w)| b * dm * w).collect()))
    }

    pub fn diagnostics(&self, model: &GalerkinModel) -> Result<NoiseDiagnostics> {
        self.check(model)?;
        let mu = model.eigenvalues();
        let a = self.modulation;
        let sup_m = 1.0 + a;
        let inf_m = 1.0 - a;
        let kappa0 = self
            .base_amplitudes
            .iter()
            .zip(mu)
            .map(|(b, mu)| (b * sup_m).powi(2) * mu.powf(1.0 + self.epsilon))
            .sum();
        // phi_n'(x).eta = b_n a cos(x_0) eta_0 and ||eta||_2^2 >= mu_0^2 eta_0^2
        let kappa1 = a * a * self.base_amplitudes.iter().zip(mu).map(|(b, mu)| (b * mu).powi(2)).sum::<f64>()
            / (mu[0] * mu[0]);
        let kappa2 = self
            .base_amplitudes
            .iter()
            .zip(mu)
            .map(|(b, mu)| 1.0 / ((b * inf_m).powi(2) * mu.powi(3)))
            .fold(0.0, f64::max);
        Ok(NoiseDiagnostics { epsilon: self.epsilon, kappa0, kappa1, kappa2 })
    }
}

fn check_len(model: &GalerkinModel, len: usize) -> Result<()> {
    if len != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), found: len });
    }
    Ok(())
}

/// Stochastic convolution `Z(t) = int_0^t e^{-nu A (t-s)} phi(X(s)) dW(s)` on
/// the trajectory grid, via the exponential recursion
/// `Z_n(t+dt) = e^{-nu mu_n dt} (Z_n(t) + phi_n(X(t)) dW_n)`.
pub fn stochastic_convolution(
    model: &GalerkinModel,
    spec: &NoiseSpec,
    trajectory: &TrajectoryRecord,
) -> Result<Vec<SpectralState>> {
    spec.check(model)?;
    trajectory.require_increments()?;
    let dt = trajectory.dt;
    let decay: Vec<f64> = model.eigenvalues().iter().map(|mu| (-model.viscosity() * mu * dt).exp()).collect();
    let dim = model.dim();
    let mut z = SpectralState::zeros(dim);
    let mut phi = vec![0.0; dim];
    let mut out = Vec::with_capacity(trajectory.states.len());
    out.push(z.clone());
    for (x, dw) in trajectory.states.iter().zip(&trajectory.increments) {
        spec.phi_into(x.as_slice(), &mut phi);
        for n in 0..dim {
            z[n] = decay[n] * (z[n] + phi[n] * dw.values[n]);
        }
        out.push(z.clone());
    }
    Ok(out)
}
