use std::ffi::CStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use nsmix_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        nsmix_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

struct Fixture {
    model: *mut NsmixModel,
    noise: *mut NsmixNoise,
}

impl Fixture {
    fn new() -> Self {
        let mut model = ptr::null_mut();
        let mut noise = ptr::null_mut();
        unsafe {
            assert_eq!(nsmix_model_shell_new(4, 1.0, 1.0, 2.0, &mut model), NsmixStatus::Ok);
            assert_eq!(nsmix_noise_constant_new(model, 2.75, &mut noise), NsmixStatus::Ok);
        }
        Fixture { model, noise }
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            nsmix_noise_free(self.noise);
            nsmix_model_free(self.model);
        }
    }
}

#[test]
fn model_queries() {
    let f = Fixture::new();
    unsafe {
        assert_eq!(nsmix_model_dim(f.model), 4);
        let mut mu = [0.0; 4];
        assert_eq!(nsmix_model_eigenvalues(f.model, mu.as_mut_ptr(), 4), NsmixStatus::Ok);
        assert_eq!(mu, [1.0, 4.0, 16.0, 64.0]);
        let mut short = [0.0; 3];
        assert_eq!(nsmix_model_eigenvalues(f.model, short.as_mut_ptr(), 3), NsmixStatus::DimensionMismatch);
        assert!(last_error().contains("dimension"));

        let u = [0.3, -0.2, 0.5, 0.1];
        let mut b = [0.0; 4];
        assert_eq!(nsmix_model_bilinear(f.model, u.as_ptr(), u.as_ptr(), b.as_mut_ptr(), 4), NsmixStatus::Ok);
        let energy: f64 = b.iter().zip(&u).map(|(x, y)| x * y).sum();
        assert!(energy.abs() < 1e-14);
        assert!(last_error().is_empty());
    }
}

#[test]
fn torus_model_has_expected_size() {
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(nsmix_model_torus_new(1, 1.0, &mut model), NsmixStatus::Ok);
        assert_eq!(nsmix_model_dim(model), 12);
        nsmix_model_free(model);
    }
}

#[test]
fn simulation_is_reproducible() {
    let f = Fixture::new();
    let x0 = [0.2, 0.1, 0.0, 0.0];
    let run = || unsafe {
        let mut traj = ptr::null_mut();
        assert_eq!(nsmix_simulate(f.model, f.noise, x0.as_ptr(), 4, 0.05, 1e-3, 11, 3, &mut traj), NsmixStatus::Ok);
        let n = nsmix_trajectory_len(traj);
        let mut last = [0.0; 4];
        let mut t = 0.0;
        assert_eq!(nsmix_trajectory_state(traj, n - 1, last.as_mut_ptr(), 4, &mut t), NsmixStatus::Ok);
        let mut blow = 0i64;
        assert_eq!(nsmix_trajectory_blow_up_step(traj, &mut blow), NsmixStatus::Ok);
        assert_eq!(blow, -1);
        nsmix_trajectory_free(traj);
        (n, last, t)
    };
    let a = run();
    assert_eq!(a.0, 51);
    assert!((a.2 - 0.05).abs() < 1e-12);
    assert_eq!(a, run());
}

#[test]
fn coupling_records_meeting() {
    let f = Fixture::new();
    let p = NsmixCouplingParams {
        macro_length: 0.5,
        delta: 1e-3,
        dt: 1e-3,
        rho: 3.0,
        max_macro_steps: 10,
        delta3: 0.0,
        proximity: NsmixProximity::MinScale,
    };
    let x = [0.01, 0.0, 0.0, 0.0];
    unsafe {
        let mut rec = ptr::null_mut();
        assert_eq!(nsmix_couple(f.model, f.noise, &p, x.as_ptr(), x.as_ptr(), 4, 1, 0, &mut rec), NsmixStatus::Ok);
        let mut step = -2i64;
        assert_eq!(nsmix_coupling_meeting_step(rec, &mut step), NsmixStatus::Ok);
        assert_eq!(step, 0);
        let mut tau = 0.0;
        assert_eq!(nsmix_coupling_tau(rec, &mut tau), NsmixStatus::Ok);
        let steps = nsmix_coupling_steps(rec);
        let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
        assert_eq!(nsmix_coupling_states(rec, steps, a.as_mut_ptr(), b.as_mut_ptr(), 4), NsmixStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(nsmix_coupling_states(rec, steps + 1, a.as_mut_ptr(), b.as_mut_ptr(), 4), NsmixStatus::OutOfRange);
        nsmix_coupling_free(rec);
    }
}

#[test]
fn invalid_inputs_report_status_and_message() {
    let f = Fixture::new();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(nsmix_model_shell_new(0, 1.0, 1.0, 2.0, &mut model), NsmixStatus::InvalidArgument);
        assert!(model.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(nsmix_model_shell_new(3, 1.0, 1.0, 2.0, ptr::null_mut()), NsmixStatus::NullPointer);
        assert_eq!(nsmix_model_eigenvalues(ptr::null(), ptr::null_mut(), 0), NsmixStatus::NullPointer);
        let mut noise = ptr::null_mut();
        assert_eq!(nsmix_noise_constant_new(f.model, 9.0, &mut noise), NsmixStatus::InvalidArgument);
        let x0 = [0.0; 4];
        let mut traj = ptr::null_mut();
        assert_eq!(nsmix_simulate(f.model, f.noise, x0.as_ptr(), 4, 1.0, -1.0, 0, 0, &mut traj), NsmixStatus::InvalidArgument);
        assert_eq!(nsmix_simulate(f.model, f.noise, x0.as_ptr(), 3, 1.0, 1e-3, 0, 0, &mut traj), NsmixStatus::DimensionMismatch);
        let len = nsmix_last_error_message(ptr::null_mut(), 0);
        let mut tiny = [1 as std::ffi::c_char; 4];
        assert_eq!(nsmix_last_error_message(tiny.as_mut_ptr(), 4), len);
        assert_eq!(tiny[3], 0);
        nsmix_model_free(ptr::null_mut());
    }
}

#[test]
fn run_command_reports_config_errors() {
    let cmd = c"simulate";
    let missing = c"/no/such/config.toml";
    unsafe {
        assert_eq!(nsmix_run_command(cmd.as_ptr(), missing.as_ptr(), ptr::null(), 1), NsmixStatus::Config);
        assert!(last_error().contains("/no/such/config.toml"));
        assert_eq!(nsmix_run_command(c"bogus".as_ptr(), missing.as_ptr(), ptr::null(), 1), NsmixStatus::InvalidArgument);
    }
}

#[test]
fn run_command_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let config = std::ffi::CString::new(config.to_str().unwrap()).unwrap();
    let out = std::ffi::CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(nsmix_run_command(c"simulate".as_ptr(), config.as_ptr(), out.as_ptr(), 1), NsmixStatus::Ok, "{}", last_error());
    }
    assert!(dir.path().join("trajectory.json").is_file());
    assert!(dir.path().join("manifest.toml").is_file());
}

fn find_static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    exe.ancestors().map(|d| d.join("libnsmix_ffi.a")).find(|p| p.is_file())
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = crate_dir.join("include");
    assert!(header_dir.join("nsmix.h").is_file());
    let Some(lib) = find_static_lib() else {
        eprintln!("static library not built in this profile; skipping link step");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("run cc");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
