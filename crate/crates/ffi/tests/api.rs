//! Exercises the C ABI through its Rust signatures, plus a C compile check of
//! the generated header.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use taperlab_ffi::*;

fn last_error() -> String {
    let p = tl_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    suite: *mut TlSuite,
    policy: *mut TlPolicy,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let cfg = tl_task_config_default();
        let mut suite = ptr::null_mut();
        let mut policy = ptr::null_mut();
        unsafe {
            assert_eq!(tl_suite_new(seed, 4, &cfg, &mut suite), TlStatus::Ok);
            assert_eq!(
                tl_policy_new_base(suite, TlPolicyKind::FeatureLinear, seed, &mut policy),
                TlStatus::Ok
            );
        }
        Self { suite, policy }
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            tl_policy_free(self.policy);
            tl_suite_free(self.suite);
        }
    }
}

#[test]
fn scalar_functions_match_the_library() {
    let mut y = f64::NAN;
    unsafe {
        assert_eq!(tl_taper(4.0, 1.0, 2.0, &mut y), TlStatus::Ok);
        assert!((y - 2.0 * (1.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(tl_taper_derivative(4.0, 1.0, 2.0, &mut y), TlStatus::Ok);
        assert!((y - 0.5).abs() < 1e-12);
        assert_eq!(tl_clip_ratio(0.2, 0.5, 2.0, &mut y), TlStatus::Ok);
        assert_eq!(y, 0.5);

        let mut c = 0.0;
        assert_eq!(tl_baseline_for_target(0.2, 0.5, &mut c), TlStatus::Ok);
        assert_eq!(tl_effective_proportion(0.2, c, &mut y), TlStatus::Ok);
        assert!((y - 0.5).abs() < 1e-12);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut y = 7.0;
    unsafe {
        assert_eq!(tl_taper(1.0, 2.0, 1.0, &mut y), TlStatus::InvalidArgument);
        assert_eq!(y, 7.0, "out pointer touched on failure");
        assert!(!last_error().is_empty());

        assert_eq!(tl_taper(1.0, 0.0, 1.0, ptr::null_mut()), TlStatus::NullPointer);
        assert!(last_error().contains("result"));

        assert_eq!(tl_taper(f64::NAN, 0.0, 1.0, &mut y), TlStatus::InvalidArgument);
    }
    tl_clear_last_error();
    assert!(tl_last_error_message().is_null());
}

#[test]
fn null_handles_are_harmless() {
    unsafe {
        tl_suite_free(ptr::null_mut());
        tl_policy_free(ptr::null_mut());
        assert_eq!(tl_suite_n_prompts(ptr::null()), 0);
        assert_eq!(tl_policy_num_params(ptr::null()), 0);
        let mut r = 0.0;
        assert_eq!(tl_policy_expected_reward(ptr::null(), ptr::null(), &mut r), TlStatus::NullPointer);
    }
}

#[test]
fn sampling_is_seeded_and_log_prob_agrees() {
    let f = Fixture::new(5);
    let max_len = tl_task_config_default().max_len;
    let mut a = [0u32; 8];
    let mut b = [0u32; 8];
    let (mut na, mut nb) = (0usize, 0usize);
    let (mut la, mut lb) = (0.0, 0.0);
    unsafe {
        assert_eq!(tl_policy_sample(f.policy, 1, max_len, 42, a.as_mut_ptr(), 8, &mut na, &mut la), TlStatus::Ok);
        assert_eq!(tl_policy_sample(f.policy, 1, max_len, 42, b.as_mut_ptr(), 8, &mut nb, &mut lb), TlStatus::Ok);
        assert_eq!(a[..na], b[..nb]);
        assert_eq!(la, lb);

        let mut lp = 0.0;
        assert_eq!(tl_policy_log_prob(f.policy, 1, a.as_ptr(), na, &mut lp), TlStatus::Ok);
        assert!((lp - la).abs() < 1e-12);

        let mut score = TlScore::default();
        assert_eq!(tl_suite_score(f.suite, 1, a.as_ptr(), na, &mut score), TlStatus::Ok);
        assert!(score.valid || !score.correct);
    }
}

#[test]
fn short_sample_buffer_reports_required_length() {
    let f = Fixture::new(6);
    let max_len = tl_task_config_default().max_len;
    unsafe {
        for seed in 0..64 {
            let mut n = 0usize;
            let status = tl_policy_sample(f.policy, 0, max_len, seed, ptr::null_mut(), 0, &mut n, ptr::null_mut());
            assert_eq!(status, TlStatus::BufferTooSmall);
            assert!(n >= 1 && n <= max_len);
        }
    }
}

#[test]
fn gradient_matches_core_estimator() {
    let f = Fixture::new(7);
    let n = unsafe { tl_policy_num_params(f.policy) };
    let tokens = [4u32, 0, 5];
    let mut log_mu = 0.0;
    unsafe {
        assert_eq!(tl_policy_log_prob(f.policy, 0, tokens.as_ptr(), 3, &mut log_mu), TlStatus::Ok);
    }
    // on-policy the TOPR negative branch reduces to plain REINFORCE
    let mut topr = vec![0.0; n];
    let mut naive = vec![0.0; n];
    unsafe {
        let s = tl_policy_gradient(f.policy, TlMethod::Topr, 0.0, 0, tokens.as_ptr(), 3, log_mu, -1.0, topr.as_mut_ptr(), n);
        assert_eq!(s, TlStatus::Ok);
        let s = tl_policy_gradient(f.policy, TlMethod::Naive, 0.0, 0, tokens.as_ptr(), 3, log_mu, -1.0, naive.as_mut_ptr(), n);
        assert_eq!(s, TlStatus::Ok);
    }
    for (x, y) in topr.iter().zip(&naive) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(topr.iter().any(|g| *g != 0.0));

    let mut short = vec![0.0; n - 1];
    let s = unsafe {
        tl_policy_gradient(f.policy, TlMethod::Tis, 0.0, 0, tokens.as_ptr(), 3, log_mu, 1.0, short.as_mut_ptr(), n - 1)
    };
    assert_eq!(s, TlStatus::BufferTooSmall);
}

#[test]
fn run_experiment_from_toml() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        "seed = 2\n[suite]\nn_prompts = 4\n[[methods]]\nkind = \"topr\"\n[schedule]\nn_iterations = 1\n\
         [[schedule.compositions]]\nstrategy = \"uniform\"\ntarget_size = 32\nn_per_prompt = 8\n\
         [eval]\nn_samples_per_prompt = 4\nks = [1]\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let c_cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let c_out = CString::new(out.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(tl_run_experiment(c_cfg.as_ptr(), c_out.as_ptr()), TlStatus::Ok);
        assert!(out.join("summary.csv").exists());

        let missing = CString::new(tmp.path().join("nope.toml").to_str().unwrap()).unwrap();
        assert_eq!(tl_run_experiment(missing.as_ptr(), c_out.as_ptr()), TlStatus::Io);

        let mut policy = ptr::null_mut();
        let saved = CString::new(out.join("topr/policy_final.json").to_str().unwrap()).unwrap();
        assert_eq!(tl_policy_load(saved.as_ptr(), &mut policy), TlStatus::Ok);
        assert!(tl_policy_num_params(policy) > 0);
        tl_policy_free(policy);
    }
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn c_compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc).arg("--version").output().ok().filter(|o| o.status.success()).map(|_| cc)
}

#[test]
fn header_compiles_as_c_and_links() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header_dir())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "generated header does not compile");

    // link against the static library when cargo has produced it next to us
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libtaperlab_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link step", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new(&cc)
        .args(["-std=c99", "-I"])
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "linking the static library failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke program exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with(env!("CARGO_PKG_VERSION")));
}
