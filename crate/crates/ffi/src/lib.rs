//! C ABI over the `nsmix` core.
//!
//! Objects are opaque handles created by `*_new` functions and released by
//! the matching `*_free`. Every fallible call returns an [`NsmixStatus`];
//! on failure the message is kept per thread and read back with
//! [`nsmix_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nsmix::cli::{self, CliError, Invocation};
use nsmix::config::Command;
use nsmix::coupling::{run_coupled_chain, CouplingParams, CouplingRecord, ProximityRule};
use nsmix::integrator::simulate_path;
use nsmix::spectral::{build_shell_model_with, build_torus_model, Forcing};
use nsmix::{Discretization, Error, GalerkinModel, NoiseSpec, RngStream, Scheme, SpectralState, TrajectoryRecord};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsmixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Config = 4,
    BlowUp = 5,
    CensoringOverflow = 6,
    Io = 7,
    OutOfRange = 8,
    Panic = 9,
    Internal = 10,
}

/// Proximity rule for attempting a kernel coupling.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsmixProximity {
    MinScale = 0,
    Mahalanobis = 1,
}

/// Coupling parameters; `delta3` is ignored when not positive.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NsmixCouplingParams {
    pub macro_length: f64,
    pub delta: f64,
    pub dt: f64,
    pub rho: f64,
    pub max_macro_steps: usize,
    pub delta3: f64,
    pub proximity: NsmixProximity,
}

pub struct NsmixModel(GalerkinModel);
pub struct NsmixNoise(NoiseSpec);
pub struct NsmixTrajectory(TrajectoryRecord);
pub struct NsmixCoupling(CouplingRecord);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(NsmixStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::DimensionMismatch { .. } => NsmixStatus::DimensionMismatch,
            Error::InvalidParameter { .. } | Error::NonFinite(_) | Error::DegenerateNoise { .. } => NsmixStatus::InvalidArgument,
            Error::Config(_) => NsmixStatus::Config,
            Error::BlowUp { .. } => NsmixStatus::BlowUp,
            Error::CensoringOverflow { .. } => NsmixStatus::CensoringOverflow,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => NsmixStatus::Io,
            _ => NsmixStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Config(inner) => Failure(NsmixStatus::Config, inner.to_string()),
            CliError::Run(inner) => inner.into(),
        }
    }
}

fn fail(status: NsmixStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `body`, records any failure and converts panics into `Panic`.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NsmixStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NsmixStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            NsmixStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(NsmixStatus::NullPointer, format!("`{what}` is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(NsmixStatus::NullPointer, format!("`{what}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(NsmixStatus::NullPointer, format!("`{what}` is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Checks `out` before building, so a null output never costs a construction.
unsafe fn out_ptr<T>(out: *mut *mut T, build: impl FnOnce() -> Result<T, Failure>) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(NsmixStatus::NullPointer, "`out` is null"));
    }
    *out = Box::into_raw(Box::new(build()?));
    Ok(())
}

unsafe fn write_scalar<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(NsmixStatus::NullPointer, "`out` is null"));
    }
    *out = value;
    Ok(())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(NsmixStatus::NullPointer, format!("`{what}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(NsmixStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

fn copy_into(src: &[f64], dst: &mut [f64]) -> Result<(), Failure> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch { expected: src.len(), found: dst.len() }.into());
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nsmix_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len - 1` bytes). Returns the full message
/// length in bytes, excluding the terminator; 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nsmix_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Shell model with `mu_n = mu1 * lambda^(2(n-1))`.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn nsmix_model_shell_new(n_shells: usize, coupling: f64, mu1: f64, lambda: f64, out: *mut *mut NsmixModel) -> NsmixStatus {
    guard(|| out_ptr(out, || Ok(NsmixModel(build_shell_model_with(n_shells, coupling, mu1, lambda)?))))
}

/// Periodic torus model keeping the modes with `|k|^2 <= cutoff`, unforced.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn nsmix_model_torus_new(cutoff: u32, viscosity: f64, out: *mut *mut NsmixModel) -> NsmixStatus {
    guard(|| out_ptr(out, || Ok(NsmixModel(build_torus_model(cutoff, viscosity, &Forcing::Zero)?))))
}

/// # Safety
/// `model` must be null or a handle from `nsmix_model_*_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nsmix_model_free(model: *mut NsmixModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of modes; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmix_model_dim(model: *const NsmixModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

/// # Safety
/// `out` must be valid for `len` doubles; `len` must equal the model dimension.
#[no_mangle]
pub unsafe extern "C" fn nsmix_model_eigenvalues(model: *const NsmixModel, out: *mut f64, len: usize) -> NsmixStatus {
    guard(|| {
        let m = deref(model, "model")?;
        copy_into(m.0.eigenvalues(), slice_mut(out, len, "out")?)
    })
}

/// `out = B(u, v)`; all three arrays have length `len` = model dimension.
///
/// # Safety
/// Pointers must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nsmix_model_bilinear(model: *const NsmixModel, u: *const f64, v: *const f64, out: *mut f64, len: usize) -> NsmixStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let u = SpectralState(slice(u, len, "u")?.to_vec());
        let v = SpectralState(slice(v, len, "v")?.to_vec());
        let b = m.0.bilinear(&u, &v)?;
        copy_into(&b.0, slice_mut(out, len, "out")?)
    })
}

/// Constant diagonal noise `b_n = mu_n^(-s/2)`.
///
/// # Safety
/// `model` must be a live handle; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn nsmix_noise_constant_new(model: *const NsmixModel, s: f64, out: *mut *mut NsmixNoise) -> NsmixStatus {
    guard(|| {
        let m = deref(model, "model")?;
        out_ptr(out, || Ok(NsmixNoise(NoiseSpec::constant_diagonal(&m.0, s)?)))
    })
}

/// State-dependent diagonal noise with modulation amplitude in `[0, 1/2]`.
///
/// # Safety
/// `model` must be a live handle; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn nsmix_noise_modulated_new(model: *const NsmixModel, s: f64, modulation: f64, out: *mut *mut NsmixNoise) -> NsmixStatus {
    guard(|| {
        let m = deref(model, "model")?;
        out_ptr(out, || Ok(NsmixNoise(NoiseSpec::modulated_diagonal(&m.0, s, modulation)?)))
    })
}

/// # Safety
/// `noise` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmix_noise_free(noise: *mut NsmixNoise) {
    if !noise.is_null() {
        drop(Box::from_raw(noise));
    }
}

/// Simulates one path from `x0` over `[0, horizon]` with the semi-implicit
/// scheme. The path is a pure function of `(seed, stream)`.
///
/// # Safety
/// Handles must be live; `x0` valid for `len` doubles; `out` for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn nsmix_simulate(
    model: *const NsmixModel,
    noise: *const NsmixNoise,
    x0: *const f64,
    len: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
    stream: u64,
    out: *mut *mut NsmixTrajectory,
) -> NsmixStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let n = deref(noise, "noise")?;
        let x0 = SpectralState(slice(x0, len, "x0")?.to_vec());
        let disc = Discretization::new(dt, Scheme::SemiImplicit)?;
        out_ptr(out, || Ok(NsmixTrajectory(simulate_path(&m.0, &n.0, &x0, horizon, disc, RngStream::new(seed, stream))?)))
    })
}

/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmix_trajectory_free(traj: *mut NsmixTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Number of stored grid states (including the initial one); 0 for null.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmix_trajectory_len(traj: *const NsmixTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.states.len())
}

/// Step at which the path blew up, or -1 if it stayed finite.
///
/// # Safety
/// `traj` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn nsmix_trajectory_blow_up_step(traj: *const NsmixTrajectory, out: *mut i64) -> NsmixStatus {
    guard(|| {
        let t = deref(traj, "traj")?;
        write_scalar(out, t.0.blown_up.map_or(-1, |s| s as i64))
    })
}

/// Copies grid state `index` and its time.
///
/// # Safety
/// `traj` must be a live handle; `state` valid for `len` doubles; `time` null or valid.
#[no_mangle]
pub unsafe extern "C" fn nsmix_trajectory_state(traj: *const NsmixTrajectory, index: usize, state: *mut f64, len: usize, time: *mut f64) -> NsmixStatus {
    guard(|| {
        let t = deref(traj, "traj")?;
        let x = t.0.states.get(index).ok_or_else(|| fail(NsmixStatus::OutOfRange, format!("state {index} of {}", t.0.states.len())))?;
        copy_into(&x.0, slice_mut(state, len, "state")?)?;
        if !time.is_null() {
            *time = t.0.times[index];
        }
        Ok(())
    })
}

/// Runs one coupled chain from `(x1, x2)`. Blow-up is recorded in the
/// result, not reported as an error.
///
/// # Safety
/// Handles and `params` must be live; `x1`, `x2` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nsmix_couple(
    model: *const NsmixModel,
    noise: *const NsmixNoise,
    params: *const NsmixCouplingParams,
    x1: *const f64,
    x2: *const f64,
    len: usize,
    seed: u64,
    stream: u64,
    out: *mut *mut NsmixCoupling,
) -> NsmixStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let n = deref(noise, "noise")?;
        let p = deref(params, "params")?;
        let params = CouplingParams {
            macro_length: p.macro_length,
            delta: p.delta,
            dt: p.dt,
            rho: p.rho,
            max_macro_steps: p.max_macro_steps,
            delta3: (p.delta3 > 0.0).then_some(p.delta3),
            proximity: match p.proximity {
                NsmixProximity::MinScale => ProximityRule::MinScale,
                NsmixProximity::Mahalanobis => ProximityRule::Mahalanobis,
            },
            scheme: Scheme::SemiImplicit,
        };
        let x1 = SpectralState(slice(x1, len, "x1")?.to_vec());
        let x2 = SpectralState(slice(x2, len, "x2")?.to_vec());
        out_ptr(out, || Ok(NsmixCoupling(run_coupled_chain(&m.0, &n.0, &params, &x1, &x2, RngStream::new(seed, stream))?)))
    })
}

/// # Safety
/// `rec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmix_coupling_free(rec: *mut NsmixCoupling) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Macro step at which the chains met, or -1.
///
/// # Safety
/// `rec` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn nsmix_coupling_meeting_step(rec: *const NsmixCoupling, out: *mut i64) -> NsmixStatus {
    guard(|| {
        let r = deref(rec, "rec")?;
        write_scalar(out, r.0.meeting_step.map_or(-1, |s| s as i64))
    })
}

/// First return time to the small ball, or -1 when not observed.
///
/// # Safety
/// `rec` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn nsmix_coupling_tau(rec: *const NsmixCoupling, out: *mut f64) -> NsmixStatus {
    guard(|| {
        let r = deref(rec, "rec")?;
        write_scalar(out, r.0.tau.unwrap_or(-1.0))
    })
}

/// Number of recorded macro steps (rows); 0 for null.
///
/// # Safety
/// `rec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmix_coupling_steps(rec: *const NsmixCoupling) -> usize {
    rec.as_ref().map_or(0, |r| r.0.rows.len())
}

/// Copies both chain states at macro step `index` (0 = initial pair).
///
/// # Safety
/// `rec` must be a live handle; `x1`, `x2` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nsmix_coupling_states(rec: *const NsmixCoupling, index: usize, x1: *mut f64, x2: *mut f64, len: usize) -> NsmixStatus {
    guard(|| {
        let r = deref(rec, "rec")?;
        let (a, b) = r.0.states.get(index).ok_or_else(|| fail(NsmixStatus::OutOfRange, format!("step {index} of {}", r.0.states.len() - 1)))?;
        copy_into(&a.0, slice_mut(x1, len, "x1")?)?;
        copy_into(&b.0, slice_mut(x2, len, "x2")?)
    })
}

/// Runs a CLI command (`"mix"`, `"simulate"`, ...) from a config file.
/// `out_dir` may be null to keep the configured directory; `threads` 0
/// uses the available parallelism.
///
/// # Safety
/// String arguments must be NUL-terminated or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn nsmix_run_command(command: *const c_char, config_path: *const c_char, out_dir: *const c_char, threads: usize) -> NsmixStatus {
    guard(|| {
        let name = c_str(command, "command")?;
        let command = Command::from_name(name).ok_or_else(|| fail(NsmixStatus::InvalidArgument, format!("unknown command `{name}`")))?;
        let out = if out_dir.is_null() { None } else { Some(PathBuf::from(c_str(out_dir, "out_dir")?)) };
        let inv = Invocation {
            config: PathBuf::from(c_str(config_path, "config_path")?),
            out,
            seed: None,
            threads: (threads > 0).then_some(threads),
            overrides: Vec::new(),
        };
        cli::run(command, &inv)?;
        Ok(())
    })
}
