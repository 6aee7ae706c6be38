//! First variation of the Galerkin flow,
//! `d eta + nu A eta dt + B~(X, eta) dt = (phi'(X).eta) dW`,
//! `B~(X, eta) = B(X, eta) + B(eta, X)`,
//! integrated along a recorded base path with the same increments, so that
//! `eta` is the exact derivative of the discrete flow map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{cumulative_trapezoid, simulate_path, Discretization, Scheme, TrajectoryRecord};
use crate::noise::NoiseSpec;
use crate::rng::RngStream;
use crate::spectral::{GalerkinModel, SpectralState};

/// `eta(t, s) h` on the grid of a base trajectory, for `t >= s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRecord {
    pub start_index: usize,
    pub start_time: f64,
    pub dt: f64,
    pub direction: SpectralState,
    /// `path[j]` is `eta` at grid time `start_time + j dt`.
    pub path: Vec<SpectralState>,
    pub blown_up: Option<usize>,
}

impl EtaRecord {
    pub fn end(&self) -> &SpectralState {
        self.path.last().expect("eta path holds its initial value")
    }

    pub fn time(&self, j: usize) -> f64 {
        self.start_time + j as f64 * self.dt
    }
}

/// One linearized step along the frozen base state `x`.
pub(crate) struct EtaStepper<'a> {
    model: &'a GalerkinModel,
    noise: &'a NoiseSpec,
    dt: f64,
    scheme: Scheme,
    decay: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> EtaStepper<'a> {
    pub(crate) fn new(model: &'a GalerkinModel, noise: &'a NoiseSpec, dt: f64, scheme: Scheme) -> Self {
        let nu = model.viscosity();
        let decay = model.eigenvalues().iter().map(|mu| (-nu * mu * dt).exp()).collect();
        EtaStepper { model, noise, dt, scheme, decay, scratch: vec![0.0; model.dim()] }
    }

    pub(crate) fn step_into(&mut self, x: &[f64], eta: &[f64], dw: &[f64], out: &mut [f64]) -> bool {
        let b = &mut self.scratch;
        b.iter_mut().for_each(|v| *v = 0.0);
        self.model.bilinear_sym_into(x, eta, b);
        let dm = self.noise.modulation_derivative(x, eta);
        let amps = self.noise.base_amplitudes();
        let mut finite = true;
        match self.scheme {
            Scheme::SemiImplicit => {
                for n in 0..out.len() {
                    out[n] = self.decay[n] * (eta[n] - self.dt * b[n] + amps[n] * dm * dw[n]);
                    finite &= out[n].is_finite();
                }
            }
            Scheme::EulerMaruyama => {
                let nu = self.model.viscosity();
                let mu = self.model.eigenvalues();
                for n in 0..out.len() {
                    out[n] = eta[n] + self.dt * (-nu * mu[n] * eta[n] - b[n]) + amps[n] * dm * dw[n];
                    finite &= out[n].is_finite();
                }
            }
        }
        finite
    }
}

/// Integrates `eta(t, s) h` from grid time `s` to the end of `trajectory`.
pub fn evolve_eta(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    trajectory: &TrajectoryRecord,
    s: f64,
    h: &SpectralState,
) -> Result<EtaRecord> {
    noise.check(model)?;
    model.check(h)?;
    trajectory.require_increments()?;
    let start = trajectory.index_of(s)?;
    let mut stepper = EtaStepper::new(model, noise, trajectory.dt, trajectory.scheme);
    let mut path = Vec::with_capacity(trajectory.states.len() - start);
    path.push(h.clone());
    let mut blown_up = None;
    for i in start..trajectory.increments.len() {
        let mut next = model.zero_state();
        let cur = path.last().unwrap();
        if !stepper.step_into(trajectory.states[i].as_slice(), cur.as_slice(), &trajectory.increments[i].values, &mut next.0) {
            blown_up = Some(i + 1);
            break;
        }
        path.push(next);
    }
    Ok(EtaRecord {
        start_index: start,
        start_time: trajectory.times[start],
        dt: trajectory.dt,
        direction: h.clone(),
        path,
        blown_up,
    })
}

/// `(X(T, x0 + eps h) - X(T, x0 - eps h)) / (2 eps)` with both branches
/// driven by the same increments.
#[allow(clippy::too_many_arguments)]
pub fn fd_directional_derivative(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    x0: &SpectralState,
    h: &SpectralState,
    eps: f64,
    horizon: f64,
    disc: Discretization,
    stream: RngStream,
) -> Result<SpectralState> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid("eps", format!("must be positive, got {eps}")));
    }
    model.check(h)?;
    let plus = simulate_path(model, noise, &x0.add_scaled(eps, h), horizon, disc, stream.clone())?;
    let minus = simulate_path(model, noise, &x0.add_scaled(-eps, h), horizon, disc, stream)?;
    for rec in [&plus, &minus] {
        if let Some(step) = rec.blown_up {
            return Err(Error::BlowUp { step });
        }
    }
    Ok(plus.last_state().sub(minus.last_state()).scaled(0.5 / eps))
}

/// Pathwise `int_s^sigma ||eta(t)||_3^2 dt`, trapezoidal.
pub fn eta_h3_budget(model: &GalerkinModel, eta: &EtaRecord, sigma: f64) -> Result<f64> {
    let j = ((sigma - eta.start_time) / eta.dt).round();
    if j < 0.0 || (eta.start_time + j * eta.dt - sigma).abs() > 1e-9 * eta.dt.max(sigma.abs()) {
        return Err(Error::OffGrid { time: sigma, dt: eta.dt });
    }
    let j = j as usize;
    if j >= eta.path.len() {
        return Err(Error::invalid("sigma", format!("{sigma} is beyond the eta record")));
    }
    let h3: Vec<f64> = eta.path[..=j].iter().map(|e| model.sobolev_norm_sq_unchecked(3.0, e.as_slice())).collect();
    Ok(cumulative_trapezoid(&h3, eta.dt)[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::Scheme;
    use crate::spectral::{build_shell_model, Forcing};

    fn setup() -> (GalerkinModel, NoiseSpec, Discretization) {
        let model = build_shell_model(5, 1.0)
            .unwrap()
            .with_forcing(&Forcing::Modes { amplitude: 0.5, indices: vec![0] })
            .unwrap();
        let noise = NoiseSpec::modulated_diagonal(&model, 2.75, 0.5).unwrap();
        (model, noise, Discretization::new(1e-3, Scheme::SemiImplicit).unwrap())
    }

    fn state(seed: usize) -> SpectralState {
        SpectralState((0..5).map(|i| 0.02 * ((seed * 5 + i) as f64 * 1.3).sin() / (i + 1) as f64).collect())
    }

    #[test]
    fn zero_direction_gives_zero() {
        let (model, noise, disc) = setup();
        let rec = simulate_path(&model, &noise, &state(1), 0.1, disc, RngStream::new(1, 1)).unwrap();
        let eta = evolve_eta(&model, &noise, &rec, 0.0, &model.zero_state()).unwrap();
        assert!(eta.path.iter().all(|e| e.0.iter().all(|&c| c == 0.0)));
        assert_eq!(eta.path.len(), rec.states.len());
    }

    #[test]
    fn linear_flow_is_exact() {
        let model = build_shell_model(5, 0.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let disc = Discretization::new(1e-3, Scheme::SemiImplicit).unwrap();
        let rec = simulate_path(&model, &noise, &state(2), 0.1, disc, RngStream::new(1, 1)).unwrap();
        let h = SpectralState(vec![1.0, -1.0, 0.5, 0.2, 0.1]);
        let eta = evolve_eta(&model, &noise, &rec, 0.02, &h).unwrap();
        for (j, e) in eta.path.iter().enumerate() {
            let t = eta.time(j) - 0.02;
            for n in 0..5 {
                let exact = (-model.eigenvalues()[n] * t).exp() * h[n];
                assert!((e[n] - exact).abs() <= 1e-12 * h[n].abs());
            }
        }
        // the linear central difference does not depend on eps
        let a = fd_directional_derivative(&model, &noise, &state(2), &h, 1e-2, 0.1, disc, RngStream::new(1, 1)).unwrap();
        let b = fd_directional_derivative(&model, &noise, &state(2), &h, 1e-5, 0.1, disc, RngStream::new(1, 1)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn matches_finite_difference() {
        let (model, noise, disc) = setup();
        let x0 = state(3);
        let h = state(4).scaled(10.0);
        let rec = simulate_path(&model, &noise, &x0, 0.2, disc, RngStream::new(5, 5)).unwrap();
        let eta = evolve_eta(&model, &noise, &rec, 0.0, &h).unwrap();
        let fd = fd_directional_derivative(&model, &noise, &x0, &h, 1e-5, 0.2, disc, RngStream::new(5, 5)).unwrap();
        let rel = eta.end().sub(&fd).norm_sq().sqrt() / fd.norm_sq().sqrt();
        assert!(rel < 1e-6, "rel = {rel}");
        // Richardson: error at eps and eps/2 both tiny
        let fd2 = fd_directional_derivative(&model, &noise, &x0, &h, 5e-6, 0.2, disc, RngStream::new(5, 5)).unwrap();
        assert!(fd2.sub(&fd).norm_sq().sqrt() / fd.norm_sq().sqrt() < 1e-6);
    }

    #[test]
    fn additive_and_homogeneous_in_direction() {
        let (model, noise, disc) = setup();
        let rec = simulate_path(&model, &noise, &state(6), 0.1, disc, RngStream::new(2, 2)).unwrap();
        let h1 = state(7);
        let h2 = state(8);
        let e1 = evolve_eta(&model, &noise, &rec, 0.0, &h1).unwrap();
        let e2 = evolve_eta(&model, &noise, &rec, 0.0, &h2).unwrap();
        let e12 = evolve_eta(&model, &noise, &rec, 0.0, &h1.add(&h2)).unwrap();
        let sum = e1.end().add(e2.end());
        assert!(e12.end().max_abs_diff(&sum) <= 1e-10 * sum.norm_sq().sqrt());

        let budget1 = eta_h3_budget(&model, &e1, 0.1).unwrap();
        let e1x2 = evolve_eta(&model, &noise, &rec, 0.0, &h1.scaled(2.0)).unwrap();
        let budget2 = eta_h3_budget(&model, &e1x2, 0.1).unwrap();
        assert!((budget2 - 4.0 * budget1).abs() <= 1e-12 * budget2);
        let zero = evolve_eta(&model, &noise, &rec, 0.0, &model.zero_state()).unwrap();
        assert_eq!(eta_h3_budget(&model, &zero, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn cocycle_identity() {
        let (model, noise, disc) = setup();
        let rec = simulate_path(&model, &noise, &state(9), 0.1, disc, RngStream::new(4, 4)).unwrap();
        let h = state(10);
        let full = evolve_eta(&model, &noise, &rec, 0.0, &h).unwrap();
        let s_index = 40;
        let mid = full.path[s_index].clone();
        let tail = evolve_eta(&model, &noise, &rec, rec.times[s_index], &mid).unwrap();
        assert!(tail.end().max_abs_diff(full.end()) <= 1e-14 * full.end().norm_sq().sqrt().max(1e-300));
    }

    #[test]
    fn errors() {
        let (model, noise, disc) = setup();
        let mut rec = simulate_path(&model, &noise, &state(1), 0.01, disc, RngStream::new(1, 1)).unwrap();
        assert!(matches!(evolve_eta(&model, &noise, &rec, 0.0005, &state(2)), Err(Error::OffGrid { .. })));
        rec.increments.clear();
        assert!(matches!(evolve_eta(&model, &noise, &rec, 0.0, &state(2)), Err(Error::MissingIncrements)));
        assert!(fd_directional_derivative(&model, &noise, &state(1), &state(2), 0.0, 0.01, disc, RngStream::new(1, 1)).is_err());
    }
}
