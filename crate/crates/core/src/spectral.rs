//! Finite-dimensional Galerkin phase space.
//!
//! Two model families share the same algebra:
//!
//! * the periodic torus `(0,1)^3`, where the basis is made of real
//!   divergence-free trigonometric modes `sqrt(2) u cos(2 pi k.x)` and
//!   `sqrt(2) u sin(2 pi k.x)` with `u . k = 0`, and the Stokes eigenvalues are
//!   `4 pi^2 |k|^2`;
//! * a synthetic shell model with geometric eigenvalues and a handcrafted
//!   triad tensor, used where the torus is too slow.
//!
//! In both cases the convection term is stored as a sparse list of triads
//! `T[l][m][n] = (B(e_l, e_m), e_n)`, built in antisymmetric pairs so that
//! `(B(u, v), v) = 0` holds to roundoff.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries of the interaction tensor below this magnitude are dropped.
pub const TENSOR_DROP_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Cos,
    Sin,
}

/// One real divergence-free Fourier mode on the unit torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WaveMode {
    pub wavevector: [i32; 3],
    pub polarization: u8,
    pub parity: Parity,
}

impl WaveMode {
    pub fn norm_sq(&self) -> i32 {
        self.wavevector.iter().map(|k| k * k).sum()
    }

    /// Unit polarization vector, orthogonal to the wavevector.
    pub fn polarization_vector(&self) -> [f64; 3] {
        polarization_vectors(self.wavevector)[self.polarization as usize]
    }
}

/// Orthonormal pair spanning the plane orthogonal to `k`.
pub fn polarization_vectors(k: [i32; 3]) -> [[f64; 3]; 2] {
    let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
    // reference axis: the coordinate with the smallest |k_j| (first on ties)
    let mut axis = 0;
    for j in 1..3 {
        if k[j].abs() < k[axis].abs() {
            axis = j;
        }
    }
    let mut a = [0.0; 3];
    a[axis] = 1.0;
    let u1 = normalize(cross(kf, a));
    let u2 = normalize(cross(kf, u1));
    [u1, u2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Whether `k` is the representative of its `{k, -k}` pair: first nonzero
/// component positive.
fn is_representative(k: [i32; 3]) -> bool {
    k.iter().find(|&&c| c != 0).is_some_and(|&c| c > 0)
}

/// Nonzero entry of the interaction tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triad {
    pub l: u32,
    pub m: u32,
    pub n: u32,
    pub value: f64,
}

/// Which basis a model was built on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis {
    Torus { cutoff: u32, modes: Vec<WaveMode> },
    Shell { n_shells: usize, coupling: f64, mu1: f64, lambda: f64 },
}

/// Description of the deterministic forcing `f`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Forcing {
    #[default]
    Zero,
    /// Same amplitude on each listed mode index (eigenvalue order).
    Modes { amplitude: f64, indices: Vec<usize> },
    Coefficients(Vec<f64>),
}

impl Forcing {
    fn project(&self, dim: usize) -> Result<SpectralState> {
        let mut f = SpectralState::zeros(dim);
        match self {
            Forcing::Zero => {}
            Forcing::Modes { amplitude, indices } => {
                if !amplitude.is_finite() {
                    return Err(Error::NonFinite("forcing amplitude"));
                }
                for &i in indices {
                    if i >= dim {
                        return Err(Error::invalid(
                            "forcing.modes",
                            format!("mode index {i} out of range for {dim} modes"),
                        ));
                    }
                    f[i] = *amplitude;
                }
            }
            Forcing::Coefficients(c) => {
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("forcing coefficients"));
                }
                // orthogonal projection onto the first `dim` modes
                for (dst, src) in f.0.iter_mut().zip(c) {
                    *dst = *src;
                }
            }
        }
        Ok(f)
    }
}

/// Real coefficient vector over a model's basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpectralState(pub Vec<f64>);

impl SpectralState {
    pub fn zeros(dim: usize) -> Self {
        SpectralState(vec![0.0; dim])
    }

    pub fn unit(dim: usize, index: usize) -> Self {
        let mut s = Self::zeros(dim);
        s.0[index] = 1.0;
        s
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// L2 inner product (the basis is orthonormal).
    pub fn inner(&self, other: &SpectralState) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self)
    }

    pub fn scaled(&self, factor: f64) -> SpectralState {
        SpectralState(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self + factor * other`
    pub fn add_scaled(&self, factor: f64, other: &SpectralState) -> SpectralState {
        SpectralState(self.0.iter().zip(&other.0).map(|(a, b)| a + factor * b).collect())
    }

    pub fn sub(&self, other: &SpectralState) -> SpectralState {
        self.add_scaled(-1.0, other)
    }

    pub fn add(&self, other: &SpectralState) -> SpectralState {
        self.add_scaled(1.0, other)
    }

    pub fn max_abs_diff(&self, other: &SpectralState) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for SpectralState {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for SpectralState {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for SpectralState {
    fn from(v: Vec<f64>) -> Self {
        SpectralState(v)
    }
}

/// The finite spectral system: basis, Stokes eigenvalues, viscosity, forcing
/// and the sparse convection tensor. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GalerkinModel {
    basis: Basis,
    eigenvalues: Vec<f64>,
    viscosity: f64,
    forcing: SpectralState,
    triads: Vec<Triad>,
}

impl GalerkinModel {
    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity
    }

    pub fn forcing(&self) -> &SpectralState {
        &self.forcing
    }

    pub fn triads(&self) -> &[Triad] {
        &self.triads
    }

    /// Torus wave modes, `None` for the shell surrogate.
    pub fn wave_modes(&self) -> Option<&[WaveMode]> {
        match &self.basis {
            Basis::Torus { modes, .. } => Some(modes),
            Basis::Shell { .. } => None,
        }
    }

    pub fn with_forcing(mut self, forcing: &Forcing) -> Result<Self> {
        self.forcing = forcing.project(self.dim())?;
        Ok(self)
    }

    pub fn with_viscosity(mut self, viscosity: f64) -> Result<Self> {
        check_viscosity(viscosity)?;
        self.viscosity = viscosity;
        Ok(self)
    }

    /// Same model with the convection tensor removed (linear Stokes flow).
    pub fn linearized(mut self) -> Self {
        self.triads.clear();
        self
    }

    pub fn check(&self, u: &SpectralState) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: u.len() });
        }
        Ok(())
    }

    pub fn zero_state(&self) -> SpectralState {
        SpectralState::zeros(self.dim())
    }

    /// Tensor entry `T[l][m][n]` (linear scan; meant for inspection).
    pub fn tensor_entry(&self, l: usize, m: usize, n: usize) -> f64 {
        self.triads
            .iter()
            .find(|t| t.l as usize == l && t.m as usize == m && t.n as usize == n)
            .map_or(0.0, |t| t.value)
    }

    /// `B(u, v)` with `n`-th coefficient `sum_{l,m} u_l v_m T[l][m][n]`.
    pub fn bilinear(&self, u: &SpectralState, v: &SpectralState) -> Result<SpectralState> {
        self.check(u)?;
        self.check(v)?;
        let mut out = self.zero_state();
        self.bilinear_into(u.as_slice(), v.as_slice(), &mut out.0);
        Ok(out)
    }

    /// Accumulates `B(u, v)` into `out` without conformance checks.
    pub(crate) fn bilinear_into(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        for t in &self.triads {
            out[t.n as usize] += u[t.l as usize] * v[t.m as usize] * t.value;
        }
    }

    /// Accumulates the linearized convection `B(x, eta) + B(eta, x)` into `out`.
    pub(crate) fn bilinear_sym_into(&self, x: &[f64], eta: &[f64], out: &mut [f64]) {
        for t in &self.triads {
            let (l, m) = (t.l as usize, t.m as usize);
            out[t.n as usize] += (x[l] * eta[m] + eta[l] * x[m]) * t.value;
        }
    }

    /// `A^s u`: coefficient `n` scaled by `mu_n^s`.
    pub fn apply_a_power(&self, s: f64, u: &SpectralState) -> Result<SpectralState> {
        self.check(u)?;
        Ok(SpectralState(
            u.0.iter().zip(&self.eigenvalues).map(|(c, mu)| c * mu.powf(s)).collect(),
        ))
    }

    /// `sqrt(sum_n mu_n^s u_n^2)`.
    pub fn sobolev_norm(&self, s: f64, u: &SpectralState) -> Result<f64> {
        self.check(u)?;
        Ok(self.sobolev_norm_sq_unchecked(s, u.as_slice()).sqrt())
    }

    pub(crate) fn sobolev_norm_sq_unchecked(&self, s: f64, u: &[f64]) -> f64 {
        if s == 0.0 {
            return u.iter().map(|c| c * c).sum();
        }
        u.iter().zip(&self.eigenvalues).map(|(c, mu)| mu.powf(s) * c * c).sum()
    }

    /// `||u||_2^2 = |A u|^2`, the quantity tested against the ball radius.
    pub fn h2_sq(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.eigenvalues).map(|(c, mu)| (mu * c) * (mu * c)).sum()
    }

    /// Keeps the first `n` modes (eigenvalue order) and zeroes the rest.
    pub fn project(&self, n: usize, u: &SpectralState) -> Result<SpectralState> {
        self.check(u)?;
        if n > self.dim() {
            return Err(Error::invalid("N", format!("{n} exceeds mode count {}", self.dim())));
        }
        let mut out = u.clone();
        for c in &mut out.0[n..] {
            *c = 0.0;
        }
        Ok(out)
    }

    pub fn describe(&self) -> ModelDescription {
        ModelDescription {
            schema_version: MODEL_SCHEMA_VERSION,
            basis: self.basis.clone(),
            viscosity: self.viscosity,
            eigenvalues: self.eigenvalues.clone(),
            forcing: self.forcing.0.clone(),
            triads: self.triads.iter().map(|t| (t.l, t.m, t.n, t.value)).collect(),
        }
    }
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Serialized form of a model for cross-implementation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub schema_version: u32,
    pub basis: Basis,
    pub viscosity: f64,
    pub eigenvalues: Vec<f64>,
    pub forcing: Vec<f64>,
    /// `(l, m, n, T[l][m][n])`
    pub triads: Vec<(u32, u32, u32, f64)>,
}

impl ModelDescription {
    pub fn into_model(self) -> Result<GalerkinModel> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported model schema version {}",
                self.schema_version
            )));
        }
        let dim = self.eigenvalues.len();
        if self.forcing.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: self.forcing.len() });
        }
        check_viscosity(self.viscosity)?;
        let triads = self
            .triads
            .into_iter()
            .map(|(l, m, n, value)| Triad { l, m, n, value })
            .collect::<Vec<_>>();
        if triads.iter().any(|t| [t.l, t.m, t.n].iter().any(|&i| i as usize >= dim)) {
            return Err(Error::invalid("triads", "index out of range"));
        }
        Ok(GalerkinModel {
            basis: self.basis,
            eigenvalues: self.eigenvalues,
            viscosity: self.viscosity,
            forcing: SpectralState(self.forcing),
            triads,
        })
    }
}

fn check_viscosity(nu: f64) -> Result<()> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::invalid("viscosity", format!("must be positive and finite, got {nu}")));
    }
    Ok(())
}

/// All real divergence-free modes with `|k|^2 <= cutoff`, sorted by eigenvalue.
pub fn enumerate_torus_modes(cutoff: u32) -> Vec<WaveMode> {
    let kmax = (cutoff as f64).sqrt().floor() as i32;
    let mut modes = Vec::new();
    for kx in -kmax..=kmax {
        for ky in -kmax..=kmax {
            for kz in -kmax..=kmax {
                let k = [kx, ky, kz];
                let n2 = kx * kx + ky * ky + kz * kz;
                if n2 == 0 || n2 as u32 > cutoff || !is_representative(k) {
                    continue;
                }
                for polarization in 0..2 {
                    for parity in [Parity::Cos, Parity::Sin] {
                        modes.push(WaveMode { wavevector: k, polarization, parity });
                    }
                }
            }
        }
    }
    modes.sort_by_key(|m| (m.norm_sq(), m.wavevector, m.polarization, m.parity));
    modes
}

/// Complex Fourier coefficients `(a_plus, a_minus)` of a real trig function
/// `f(theta) = a_plus e^{i theta} + a_minus e^{-i theta}`, each as `[re, im]`.
type TrigCoeffs = [[f64; 2]; 2];

fn trig_coeffs(parity: Parity, derivative: bool) -> TrigCoeffs {
    match (parity, derivative) {
        // cos
        (Parity::Cos, false) | (Parity::Sin, true) => [[0.5, 0.0], [0.5, 0.0]],
        // sin = (e^{i} - e^{-i}) / 2i
        (Parity::Sin, false) => [[0.0, -0.5], [0.0, 0.5]],
        // d/dtheta cos = -sin
        (Parity::Cos, true) => [[0.0, 0.5], [0.0, -0.5]],
    }
}

fn cmul(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] * b[0] - a[1] * b[1], a[0] * b[1] + a[1] * b[0]]
}

/// `int_{(0,1)^3} f_l(2 pi k_l.x) f_m(2 pi k_m.x) f_n(2 pi k_n.x) dx`
/// by collecting the zero-frequency terms of the exponential expansion.
fn triple_trig_integral(
    kl: [i32; 3],
    fl: TrigCoeffs,
    km: [i32; 3],
    fm: TrigCoeffs,
    kn: [i32; 3],
    fn_: TrigCoeffs,
) -> f64 {
    let mut acc = [0.0, 0.0];
    for (il, sl) in [1, -1].into_iter().enumerate() {
        for (im, sm) in [1, -1].into_iter().enumerate() {
            for (in_, sn) in [1, -1].into_iter().enumerate() {
                let resonant = (0..3).all(|j| sl * kl[j] + sm * km[j] + sn * kn[j] == 0);
                if resonant {
                    let p = cmul(cmul(fl[il], fm[im]), fn_[in_]);
                    acc[0] += p[0];
                    acc[1] += p[1];
                }
            }
        }
    }
    debug_assert!(acc[1].abs() < 1e-12, "triple trig integral must be real");
    acc[0]
}

/// Exact `(B(e_l, e_m), e_n) = int ((e_l . grad) e_m) . e_n dx` for torus modes.
pub fn torus_tensor_entry(l: &WaveMode, m: &WaveMode, n: &WaveMode) -> f64 {
    let ul = l.polarization_vector();
    let um = m.polarization_vector();
    let un = n.polarization_vector();
    let km = [m.wavevector[0] as f64, m.wavevector[1] as f64, m.wavevector[2] as f64];
    let geometric = 2.0 * 2f64.sqrt() * 2.0 * PI * dot3(ul, km) * dot3(um, un);
    if geometric == 0.0 {
        return 0.0;
    }
    let integral = triple_trig_integral(
        l.wavevector,
        trig_coeffs(l.parity, false),
        m.wavevector,
        trig_coeffs(m.parity, true),
        n.wavevector,
        trig_coeffs(n.parity, false),
    );
    geometric * integral
}

/// Builds the torus model with all modes `|k|^2 <= cutoff`.
pub fn build_torus_model(cutoff: u32, viscosity: f64, forcing: &Forcing) -> Result<GalerkinModel> {
    check_viscosity(viscosity)?;
    let modes = enumerate_torus_modes(cutoff);
    if modes.is_empty() {
        return Err(Error::invalid("cutoff", format!("cutoff {cutoff} produces no modes")));
    }
    let eigenvalues = modes.iter().map(|m| 4.0 * PI * PI * m.norm_sq() as f64).collect();
    let dim = modes.len();
    let mut triads = Vec::new();
    for (l, ml) in modes.iter().enumerate() {
        for m in 0..dim {
            for n in (m + 1)..dim {
                let value = torus_tensor_entry(ml, &modes[m], &modes[n]);
                if value.abs() > TENSOR_DROP_TOL {
                    push_pair(&mut triads, l, m, n, value);
                }
            }
        }
    }
    let forcing = forcing.project(dim)?;
    Ok(GalerkinModel {
        basis: Basis::Torus { cutoff, modes },
        eigenvalues,
        viscosity,
        forcing,
        triads,
    })
}

/// Pushes `T[l][m][n] = value` together with `T[l][n][m] = -value`.
fn push_pair(triads: &mut Vec<Triad>, l: usize, m: usize, n: usize, value: f64) {
    let (l, m, n) = (l as u32, m as u32, n as u32);
    triads.push(Triad { l, m, n, value });
    triads.push(Triad { l, m: n, n: m, value: -value });
}

/// Default lowest shell eigenvalue, matching the lowest torus eigenvalue.
pub const SHELL_DEFAULT_MU1: f64 = 4.0 * PI * PI;
/// Default shell wavenumber ratio; eigenvalues grow by `lambda^2` per shell.
pub const SHELL_DEFAULT_LAMBDA: f64 = 2.0;

/// Shell surrogate with default `mu_1` and `lambda`.
pub fn build_shell_model(n_shells: usize, coupling: f64) -> Result<GalerkinModel> {
    build_shell_model_with(n_shells, coupling, SHELL_DEFAULT_MU1, SHELL_DEFAULT_LAMBDA)
}

/// Shell surrogate: one real variable per shell, `mu_n = mu1 lambda^{2(n-1)}`,
/// nearest-neighbour triads `(a, a+1, a+2)` scaled by the middle wavenumber.
pub fn build_shell_model_with(
    n_shells: usize,
    coupling: f64,
    mu1: f64,
    lambda: f64,
) -> Result<GalerkinModel> {
    if n_shells < 3 {
        return Err(Error::invalid("n_shells", format!("need at least 3 shells, got {n_shells}")));
    }
    if !coupling.is_finite() {
        return Err(Error::NonFinite("shell coupling"));
    }
    if !(mu1.is_finite() && mu1 > 0.0) {
        return Err(Error::invalid("mu1", "must be positive"));
    }
    if !(lambda.is_finite() && lambda > 1.0) {
        return Err(Error::invalid("lambda", "must exceed 1"));
    }
    let eigenvalues: Vec<f64> =
        (0..n_shells).map(|n| mu1 * lambda.powi(2 * n as i32)).collect();
    let mut triads = Vec::new();
    if coupling != 0.0 {
        // each shell of the triad advects the other two
        const WEIGHTS: [f64; 3] = [1.0, -0.5, 0.25];
        for a in 0..n_shells - 2 {
            let k = eigenvalues[a + 1].sqrt();
            let (b, c) = (a + 1, a + 2);
            push_pair(&mut triads, a, b, c, coupling * WEIGHTS[0] * k);
            push_pair(&mut triads, b, a, c, coupling * WEIGHTS[1] * k);
            push_pair(&mut triads, c, a, b, coupling * WEIGHTS[2] * k);
        }
    }
    Ok(GalerkinModel {
        basis: Basis::Shell { n_shells, coupling, mu1, lambda },
        eigenvalues,
        viscosity: 1.0,
        forcing: SpectralState::zeros(n_shells),
        triads,
    })
}
