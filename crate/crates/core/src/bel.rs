//! Monte Carlo gradients of `x -> E[g(X(T, x)) psi_X]` through the truncated
//! Bismut–Elworthy–Li representation
//!
//! ```text
//! J = (1/T) E[ g(X(T)) psi_X  int_0^sigma (phi^{-1}(X) eta, dW) ]
//!   + 2     E[ g(X(T)) psi'_X int_0^sigma (1 - t/T) (A X, A eta) dt ]
//! ```
//!
//! where `psi_X = psi(int_0^T ||X||_2^2)` and `sigma` is the first time the
//! running integral reaches `K0 + 1`. Both weights vanish when `sigma < T`,
//! so the truncation never changes the value, only the work. The stochastic
//! integral is a forward (left-point) Itô sum on the simulation grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derivative::EtaStepper;
use crate::error::{Error, Result};
use crate::integrator::{simulate_path, Discretization, Stepper};
use crate::noise::NoiseSpec;
use crate::rng::RngStream;
use crate::spectral::{GalerkinModel, SpectralState};
use crate::stats::{gauss_legendre, Estimate, MeanVar};

/// Smooth cutoff `psi`: 1 below `K0`, 0 above `K0 + 1`, quintic smoothstep
/// in between (C2 at both ends).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub k0: f64,
}

impl CutoffSpec {
    pub fn new(k0: f64) -> Result<Self> {
        if !(k0 > 0.0) {
            return Err(Error::invalid("K0", format!("must be positive, got {k0}")));
        }
        Ok(CutoffSpec { k0 })
    }

    /// `K0 = +inf`: `psi = 1` and `psi' = 0` everywhere.
    pub fn disabled() -> Self {
        CutoffSpec { k0: f64::INFINITY }
    }

    pub fn is_disabled(&self) -> bool {
        self.k0.is_infinite()
    }

    /// `(psi(r), psi'(r))`.
    pub fn psi(&self, r: f64) -> (f64, f64) {
        let u = r - self.k0;
        if u <= 0.0 {
            (1.0, 0.0)
        } else if u >= 1.0 {
            (0.0, 0.0)
        } else {
            let u2 = u * u;
            let u3 = u2 * u;
            let value = 1.0 - (10.0 * u3 - 15.0 * u3 * u + 6.0 * u3 * u2);
            let slope = -30.0 * u2 * (1.0 - u) * (1.0 - u);
            (value, slope)
        }
    }
}

pub fn psi_cutoff(spec: &CutoffSpec, r: f64) -> (f64, f64) {
    spec.psi(r)
}

/// Observables selectable by name in the experiment configuration.
///
/// * `coordinate`: `g(x) = x_index`
/// * `squared_norm_capped`: `g(x) = cap tanh(|x|^2 / cap)`
/// * `smooth_indicator`: `g(x) = 1 / (1 + exp((|x|^2 - radius_sq) / width))`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    Coordinate { index: usize },
    SquaredNormCapped { cap: f64 },
    SmoothIndicator { radius_sq: f64, width: f64 },
}

impl Observable {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            Observable::Coordinate { index } if index >= dim => {
                Err(Error::invalid("observable.index", format!("{index} out of range for {dim} modes")))
            }
            Observable::SquaredNormCapped { cap } if !(cap > 0.0 && cap.is_finite()) => {
                Err(Error::invalid("observable.cap", "must be positive"))
            }
            Observable::SmoothIndicator { radius_sq, width }
                if !(width > 0.0 && width.is_finite() && radius_sq.is_finite()) =>
            {
                Err(Error::invalid("observable.width", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            Observable::Coordinate { index } => x[index],
            Observable::SquaredNormCapped { cap } => cap * (norm_sq(x) / cap).tanh(),
            Observable::SmoothIndicator { radius_sq, width } => {
                1.0 / (1.0 + ((norm_sq(x) - radius_sq) / width).exp())
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            Observable::Coordinate { index } => {
                let mut g = vec![0.0; x.len()];
                g[index] = 1.0;
                g
            }
            Observable::SquaredNormCapped { cap } => {
                let sech2 = 1.0 / (norm_sq(x) / cap).cosh().powi(2);
                x.iter().map(|v| 2.0 * v * sech2).collect()
            }
            Observable::SmoothIndicator { width, .. } => {
                let g = self.value(x);
                let c = -g * (1.0 - g) / width;
                x.iter().map(|v| 2.0 * c * v).collect()
            }
        }
    }
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Everything fixed across samples of one gradient estimate.
#[derive(Debug, Clone, Copy)]
pub struct BelProblem<'a> {
    pub model: &'a GalerkinModel,
    pub noise: &'a NoiseSpec,
    pub cutoff: CutoffSpec,
    pub observable: Observable,
    pub horizon: f64,
    pub disc: Discretization,
}

/// One path's contribution to the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BelSample {
    /// `g(X(T))`
    pub g_value: f64,
    pub psi: f64,
    pub psi_prime: f64,
    /// `int_0^sigma (phi^{-1}(X) eta, dW)`
    pub ito_term: f64,
    /// `int_0^sigma (1 - t/T) (A X, A eta) dt`
    pub drift_term: f64,
    pub sigma: f64,
    /// `g psi (1/T) ito_term + 2 g psi' drift_term`
    pub value: f64,
    /// Chain-rule estimate `psi (grad g, eta(T)) + 2 g psi' int_0^T (A X, A eta)`.
    pub pathwise: f64,
    /// `g(X(T)) psi_X`, the quantity being differentiated.
    pub g_psi: f64,
}

impl<'a> BelProblem<'a> {
    pub fn validate(&self) -> Result<()> {
        self.noise.check(self.model)?;
        self.noise.ensure_nondegenerate()?;
        self.observable.validate(self.model.dim())?;
        self.disc.steps_for(self.horizon)?;
        Ok(())
    }

    /// Simulates one path from `x0` with its derivative in direction `h`.
    /// `Ok(None)` when the path or its derivative blows up.
    pub fn sample(&self, x0: &SpectralState, h: &SpectralState, mut stream: RngStream) -> Result<Option<BelSample>> {
        let model = self.model;
        model.check(x0)?;
        model.check(h)?;
        let n_steps = self.disc.steps_for(self.horizon)?;
        let dt = self.disc.dt;
        let horizon = n_steps as f64 * dt;
        let dim = model.dim();
        let mu = model.eigenvalues();
        let threshold = self.cutoff.k0 + 1.0;

        let mut stepper = Stepper::new(model, self.noise, self.disc)?;
        let mut eta_stepper = EtaStepper::new(model, self.noise, dt, self.disc.scheme);
        let mut x = x0.0.clone();
        let mut eta = h.0.clone();
        let mut x_next = vec![0.0; dim];
        let mut eta_next = vec![0.0; dim];
        let mut dw = vec![0.0; dim];
        let mut weights = vec![0.0; dim];

        let aa = |x: &[f64], e: &[f64]| -> f64 { (0..dim).map(|n| mu[n] * mu[n] * x[n] * e[n]).sum() };

        let mut integral = 0.0;
        let mut h2_prev = model.h2_sq(&x);
        let mut q_prev = aa(&x, &eta); // (1 - 0/T) (AX, A eta)
        let mut full_drift = 0.0;
        let mut ito = 0.0;
        let mut drift = 0.0;
        let mut stopped = integral >= threshold;
        let mut sigma = if stopped { 0.0 } else { horizon };

        for i in 0..n_steps {
            stream.fill_normal(dt, &mut dw);
            if !stopped {
                self.noise.phi_inverse_into(&x, &eta, &mut weights)?;
                ito += weights.iter().zip(&dw).map(|(w, d)| w * d).sum::<f64>();
            }
            eta_stepper.step_into(&x, &eta, &dw, &mut eta_next);
            if !stepper.step_into(&x, &dw, &mut x_next) || eta_next.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            std::mem::swap(&mut x, &mut x_next);
            std::mem::swap(&mut eta, &mut eta_next);

            let t = (i + 1) as f64 * dt;
            let h2 = model.h2_sq(&x);
            let raw = aa(&x, &eta);
            let q = (1.0 - t / horizon) * raw;
            integral += 0.5 * dt * (h2_prev + h2);
            full_drift += 0.5 * dt * (aa_prev_raw(q_prev, i, dt, horizon) + raw);
            if !stopped {
                drift += 0.5 * dt * (q_prev + q);
                if integral >= threshold {
                    stopped = true;
                    sigma = t;
                }
            }
            h2_prev = h2;
            q_prev = q;
        }

        let g_value = self.observable.value(&x);
        let (psi, psi_prime) = self.cutoff.psi(integral);
        let value = if psi == 0.0 && psi_prime == 0.0 {
            0.0
        } else {
            g_value * psi * ito / horizon + 2.0 * g_value * psi_prime * drift
        };
        let grad = self.observable.gradient(&x);
        let grad_eta: f64 = grad.iter().zip(&eta).map(|(a, b)| a * b).sum();
        let pathwise = psi * grad_eta + 2.0 * g_value * psi_prime * full_drift;
        Ok(Some(BelSample {
            g_value,
            psi,
            psi_prime,
            ito_term: ito,
            drift_term: drift,
            sigma,
            value,
            pathwise,
            g_psi: g_value * psi,
        }))
    }
}

/// Recovers `(A X, A eta)` at step `i` from its `(1 - t/T)`-weighted value.
fn aa_prev_raw(q_prev: f64, i: usize, dt: f64, horizon: f64) -> f64 {
    let w = 1.0 - i as f64 * dt / horizon;
    if w == 0.0 {
        0.0
    } else {
        q_prev / w
    }
}

/// One draw of the truncated BEL gradient estimator in direction `h`.
pub fn bel_gradient_sample(problem: &BelProblem<'_>, x0: &SpectralState, h: &SpectralState, stream: RngStream) -> Result<Option<f64>> {
    Ok(problem.sample(x0, h, stream)?.map(|s| s.value))
}

/// Monte Carlo summary of many [`BelSample`]s from the same start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub bel: Estimate,
    pub pathwise: Estimate,
    pub g_psi: Estimate,
    /// Mean of the `(1/T)` stochastic-integral part alone.
    pub ito_part: Estimate,
}

/// Quantile of the pilot energy integral used as the default `K0`.
pub const K0_PILOT_QUANTILE: f64 = 0.9;

/// `K0` as the `quantile` of `int_0^T ||X||_2^2` over `n_paths` pilot paths
/// from `x0`; path `i` runs on `root.substream(i)`. Blown-up paths are
/// dropped.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_k0(
    model: &GalerkinModel,
    noise: &NoiseSpec,
    x0: &SpectralState,
    horizon: f64,
    disc: Discretization,
    n_paths: usize,
    quantile: f64,
    root: &RngStream,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::invalid("quantile", "must lie in [0, 1]"));
    }
    let energies: Vec<Option<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let rec = simulate_path(model, noise, x0, horizon, disc, root.substream(i as u64))?;
            if rec.blown_up.is_some() {
                return Ok(None);
            }
            let h2: Vec<f64> = rec.states.iter().map(|x| model.h2_sq(&x.0)).collect();
            Ok(Some(h2.windows(2).map(|w| 0.5 * disc.dt * (w[0] + w[1])).sum()))
        })
        .collect::<Result<_>>()?;
    let mut ok: Vec<f64> = energies.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    ok.sort_by(f64::total_cmp);
    let k0 = ok[((ok.len() - 1) as f64 * quantile).round() as usize];
    if !(k0 > 0.0) {
        return Err(Error::invalid("K0", "pilot energy integral is zero; set bel.k0 explicitly"));
    }
    Ok(k0)
}

/// Runs `n_samples` paths from `x0` on streams `root.substream(i)`.
pub fn estimate_gradient(
    problem: &BelProblem<'_>,
    x0: &SpectralState,
    h: &SpectralState,
    n_samples: usize,
    root: &RngStream,
) -> Result<GradientEstimate> {
    problem.validate()?;
    let samples: Vec<Option<BelSample>> = (0..n_samples)
        .into_par_iter()
        .map(|i| problem.sample(x0, h, root.substream(i as u64)))
        .collect::<Result<_>>()?;
    let censored = samples.iter().filter(|s| s.is_none()).count();
    let ok: Vec<&BelSample> = samples.iter().flatten().collect();
    let horizon = problem.disc.steps_for(problem.horizon)? as f64 * problem.disc.dt;
    let stat = |f: &dyn Fn(&BelSample) -> f64| ok.iter().map(|s| f(s)).collect::<MeanVar>().estimate(censored);
    Ok(GradientEstimate {
        bel: stat(&|s| s.value),
        pathwise: stat(&|s| s.pathwise),
        g_psi: stat(&|s| s.g_psi),
        ito_part: stat(&|s| s.g_value * s.psi * s.ito_term / horizon),
    })
}

/// Estimate of `E[g psi](x0_2) - E[g psi](x0_1)` as the line integral of the
/// BEL gradient along `x0_theta = (2 - theta) x0_1 + (theta - 1) x0_2`,
/// `theta` in `[1, 2]`, with Gauss–Legendre nodes. Each sample uses the same
/// stream at every node, so the standard error comes from per-sample
/// quadrature sums.
pub fn gradient_difference(
    problem: &BelProblem<'_>,
    x0_1: &SpectralState,
    x0_2: &SpectralState,
    n_samples: usize,
    theta_nodes: usize,
    root: &RngStream,
) -> Result<Estimate> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "need at least one sample"));
    }
    problem.validate()?;
    problem.model.check(x0_1)?;
    problem.model.check(x0_2)?;
    let h = x0_2.sub(x0_1);
    if h.0.iter().all(|&c| c == 0.0) {
        return Ok(Estimate { value: 0.0, se: 0.0, n: n_samples, censored: 0 });
    }
    let rule = gauss_legendre(theta_nodes, 1.0, 2.0)?;
    let starts: Vec<SpectralState> =
        rule.iter().map(|&(theta, _)| x0_1.scaled(2.0 - theta).add_scaled(theta - 1.0, x0_2)).collect();
    let per_sample: Vec<Option<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut total = 0.0;
            for ((_, w), start) in rule.iter().zip(&starts) {
                match bel_gradient_sample(problem, start, &h, root.substream(i as u64))? {
                    Some(v) => total += w * v,
                    None => return Ok(None),
                }
            }
            Ok(Some(total))
        })
        .collect::<Result<_>>()?;
    let censored = per_sample.iter().filter(|s| s.is_none()).count();
    Ok(per_sample.into_iter().flatten().collect::<MeanVar>().estimate(censored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{simulate_path, Scheme};
    use crate::spectral::{build_shell_model, build_shell_model_with};

    #[test]
    fn pilot_k0_is_an_ordered_quantile() {
        let model = build_shell_model(3, 1.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let disc = Discretization::new(1e-3, Scheme::SemiImplicit).unwrap();
        let x0 = SpectralState(vec![0.1, 0.0, 0.0]);
        let root = RngStream::new(7, 4);
        let k = |q| calibrate_k0(&model, &noise, &x0, 0.1, disc, 200, q, &root).unwrap();
        let (lo, mid, hi) = (k(0.0), k(K0_PILOT_QUANTILE), k(1.0));
        assert!(0.0 < lo && lo <= mid && mid <= hi);
        assert_eq!(mid, k(K0_PILOT_QUANTILE));
        assert!(calibrate_k0(&model, &noise, &x0, 0.1, disc, 10, 1.5, &root).is_err());
    }

    #[test]
    fn psi_boundaries() {
        let c = CutoffSpec::new(2.0).unwrap();
        assert_eq!(c.psi(2.0), (1.0, 0.0));
        assert_eq!(c.psi(3.0), (0.0, 0.0));
        assert_eq!(c.psi(-5.0), (1.0, 0.0));
        assert_eq!(c.psi(10.0), (0.0, 0.0));
        let h = 1e-5;
        let fd = (c.psi(2.5 + h).0 - c.psi(2.5 - h).0) / (2.0 * h);
        assert!((fd - c.psi(2.5).1).abs() < 1e-8);
        for k in 0..=100 {
            let (v, d) = c.psi(2.0 + k as f64 / 100.0);
            assert!((0.0..=1.0).contains(&v));
            assert!((-1.875 - 1e-12..=0.0).contains(&d));
        }
        assert!(CutoffSpec::new(0.0).is_err());
        assert_eq!(CutoffSpec::disabled().psi(1e300), (1.0, 0.0));
    }

    #[test]
    fn observable_gradients_match_finite_differences() {
        let x = [0.3, -0.4, 0.2];
        let dir = [0.1, 0.7, -0.5];
        for g in [
            Observable::Coordinate { index: 1 },
            Observable::SquaredNormCapped { cap: 0.2 },
            Observable::SmoothIndicator { radius_sq: 0.25, width: 0.05 },
        ] {
            let eps = 1e-6;
            let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + eps * b).collect();
            let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a - eps * b).collect();
            let fd = (g.value(&xp) - g.value(&xm)) / (2.0 * eps);
            let an: f64 = g.gradient(&x).iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() < 1e-8, "{g:?}");
        }
        assert!(Observable::Coordinate { index: 3 }.validate(3).is_err());
    }

    fn ou_problem(model: &GalerkinModel, noise: &NoiseSpec) -> BelProblem<'static> {
        let model: &'static GalerkinModel = Box::leak(Box::new(model.clone()));
        let noise: &'static NoiseSpec = Box::leak(Box::new(noise.clone()));
        BelProblem {
            model,
            noise,
            cutoff: CutoffSpec::disabled(),
            observable: Observable::Coordinate { index: 0 },
            horizon: 0.2,
            disc: Discretization::new(2e-3, Scheme::SemiImplicit).unwrap(),
        }
    }

    #[test]
    fn zero_direction_gives_zero() {
        let model = build_shell_model(4, 1.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let mut p = ou_problem(&model, &noise);
        p.cutoff = CutoffSpec::new(0.5).unwrap();
        let x0 = SpectralState(vec![0.01, 0.0, 0.0, 0.0]);
        let v = bel_gradient_sample(&p, &x0, &model.zero_state(), RngStream::new(1, 2)).unwrap().unwrap();
        assert_eq!(v, 0.0);
        let d = gradient_difference(&p, &x0, &x0, 10, 4, &RngStream::new(1, 1)).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn disabled_cutoff_kills_the_drift_term() {
        let model = build_shell_model(4, 1.0).unwrap();
        let noise = NoiseSpec::modulated_diagonal(&model, 2.75, 0.5).unwrap();
        let p = ou_problem(&model, &noise);
        let x0 = SpectralState(vec![0.01, 0.002, 0.0, 0.0]);
        let h = SpectralState(vec![1.0, 0.5, 0.1, 0.0]);
        for k in 0..20 {
            let s = p.sample(&x0, &h, RngStream::new(3, k)).unwrap().unwrap();
            assert_eq!(s.psi_prime, 0.0);
            assert_eq!(s.value, s.g_value * s.ito_term / 0.2);
        }
    }

    #[test]
    fn ou_gradient_is_unbiased() {
        // exact semigroup gradient of E[x_0(T)] in direction h: e^{-nu mu_1 T} h_0
        let model = build_shell_model_with(3, 0.0, 1.0, 2.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let p = ou_problem(&model, &noise);
        let x0 = SpectralState(vec![0.3, 0.0, 0.0]);
        let h = SpectralState(vec![1.0, 0.0, 0.0]);
        let est = estimate_gradient(&p, &x0, &h, 4000, &RngStream::new(8, 0)).unwrap();
        let exact = (-0.2f64).exp();
        assert!(est.bel.within(exact, 3.0), "{:?} vs {exact}", est.bel);
        // pathwise estimator is exact for a linear observable on a linear flow
        assert!((est.pathwise.value - exact).abs() < 1e-12);
    }

    #[test]
    fn constant_observable_has_zero_gradient() {
        // g = capped norm with a huge cap is ~|x|^2; use a cutoff to exercise both terms
        let model = build_shell_model_with(3, 1.0, 1.0, 2.0).unwrap();
        let noise = NoiseSpec::constant_diagonal(&model, 2.75).unwrap();
        let mut p = ou_problem(&model, &noise);
        p.observable = Observable::SmoothIndicator { radius_sq: 1e6, width: 1.0 };
        p.cutoff = CutoffSpec::new(0.02).unwrap();
        let x0 = SpectralState(vec![0.3, 0.05, 0.0]);
        let h = SpectralState(vec![1.0, 0.0, 0.0]);
        let rec = simulate_path(&model, &noise, &x0, 0.2, p.disc, RngStream::new(0, 0)).unwrap();
        assert!(rec.blown_up.is_none());
        let est = estimate_gradient(&p, &x0, &h, 4000, &RngStream::new(9, 0)).unwrap();
        assert!(est.bel.within(0.0, 3.0), "{:?}", est.bel);
    }
}
