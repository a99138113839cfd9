//! C ABI over the taperlab estimators and task harness.
//!
//! Conventions:
//!
//! * every fallible function returns a [`TlStatus`]; results go through out
//!   pointers, which are written only on success (a too-short buffer still
//!   gets its required length reported);
//! * on failure [`tl_last_error_message`] describes the most recent error on
//!   the calling thread;
//! * suites and policies are opaque handles created by `tl_*_new` functions
//!   and released with the matching `tl_*_free`. Handles are not thread-safe;
//!   share them across threads only with external locking.
//!
//! Panics never cross the boundary; they surface as [`TlStatus::Panic`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taperlab::dataset::{baseline_for_target, effective_proportion};
use taperlab::experiment::{load_policy, run_experiment, ExperimentConfig};
use taperlab::objectives::{clip_ratio, per_trajectory_gradient, taper, taper_derivative};
use taperlab::task::{base_policy, build_suite, BasePolicyConfig};
use taperlab::{Error, MethodConfig, MethodKind, PolicyKind, PolicyParams, TaskConfig, TaskSuite, TokenId, Trajectory};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// A numeric failure: non-finite value or degenerate policy.
    Numeric = 3,
    Config = 4,
    Io = 5,
    /// The caller's output buffer is too short; the required length is
    /// reported through the length out pointer.
    BufferTooSmall = 6,
    Panic = 7,
}

/// Estimator selector for [`tl_policy_gradient`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlMethod {
    Sft = 0,
    Naive = 1,
    Opr = 2,
    Tis = 3,
    Topr = 4,
    Ppo = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlPolicyKind {
    Tabular = 0,
    FeatureLinear = 1,
}

/// Difficulty knobs of a generated suite.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TlTaskConfig {
    pub n_digits: usize,
    pub answer_len: usize,
    pub n_distractors: usize,
    pub max_len: usize,
}

/// Score of one response.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TlScore {
    pub reward: f64,
    pub valid: bool,
    pub correct: bool,
}

/// A synthetic task suite.
pub struct TlSuite(TaskSuite);

/// A softmax policy.
pub struct TlPolicy(PolicyParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(TlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NonFinite(_) | Error::DegeneratePolicy(_) | Error::UnnormalizedSupport { .. } => TlStatus::Numeric,
            Error::Config(_) | Error::Parse { .. } => TlStatus::Config,
            Error::Io { .. } => TlStatus::Io,
            _ => TlStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

fn null(what: &str) -> Failure {
    Failure(TlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any error and converts panics into a status.
fn guard<F: FnOnce() -> FfiResult<()>>(f: F) -> TlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TlStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            TlStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> FfiResult<&'a mut T> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn path<'a>(ptr: *const c_char, what: &str) -> FfiResult<&'a Path> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(TlStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

/// Message for the last failed call on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Forgets the last error on this thread.
#[no_mangle]
pub extern "C" fn tl_clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `clip(x, a, b)`.
#[no_mangle]
pub unsafe extern "C" fn tl_clip_ratio(x: f64, a: f64, b: f64, result: *mut f64) -> TlStatus {
    guard(|| {
        let r = out(result, "result")?;
        *r = clip_ratio(x, a, b)?;
        Ok(())
    })
}

/// Taper of `x` with limits `a <= b`.
#[no_mangle]
pub unsafe extern "C" fn tl_taper(x: f64, a: f64, b: f64, result: *mut f64) -> TlStatus {
    guard(|| {
        let r = out(result, "result")?;
        *r = taper(x, a, b)?;
        Ok(())
    })
}

/// Derivative of the taper with respect to `x`.
#[no_mangle]
pub unsafe extern "C" fn tl_taper_derivative(x: f64, a: f64, b: f64, result: *mut f64) -> TlStatus {
    guard(|| {
        let r = out(result, "result")?;
        *r = taper_derivative(x, a, b)?;
        Ok(())
    })
}

/// Effective positive proportion of a dataset with raw proportion `p` under
/// baseline `c`.
#[no_mangle]
pub unsafe extern "C" fn tl_effective_proportion(p: f64, c: f64, result: *mut f64) -> TlStatus {
    guard(|| {
        let r = out(result, "result")?;
        *r = effective_proportion(p, c)?;
        Ok(())
    })
}

/// Baseline that moves raw proportion `p` to effective proportion `target`.
#[no_mangle]
pub unsafe extern "C" fn tl_baseline_for_target(p: f64, target: f64, result: *mut f64) -> TlStatus {
    guard(|| {
        let r = out(result, "result")?;
        *r = baseline_for_target(p, target)?;
        Ok(())
    })
}

/// Default difficulty knobs.
#[no_mangle]
pub extern "C" fn tl_task_config_default() -> TlTaskConfig {
    let d = TaskConfig::default();
    TlTaskConfig {
        n_digits: d.n_digits,
        answer_len: d.answer_len,
        n_distractors: d.n_distractors,
        max_len: d.max_len,
    }
}

/// Builds a suite of `n_prompts` prompts with seeded random targets.
#[no_mangle]
pub unsafe extern "C" fn tl_suite_new(
    seed: u64,
    n_prompts: usize,
    config: *const TlTaskConfig,
    suite: *mut *mut TlSuite,
) -> TlStatus {
    guard(|| {
        let slot = out(suite, "suite")?;
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let task = TaskConfig {
            n_digits: c.n_digits,
            answer_len: c.answer_len,
            n_distractors: c.n_distractors,
            max_len: c.max_len,
            ..TaskConfig::default()
        };
        let built = build_suite(seed, n_prompts, &task)?;
        *slot = Box::into_raw(Box::new(TlSuite(built)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tl_suite_free(suite: *mut TlSuite) {
    if !suite.is_null() {
        drop(Box::from_raw(suite));
    }
}

/// Number of prompts, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn tl_suite_n_prompts(suite: *const TlSuite) -> usize {
    suite.as_ref().map_or(0, |s| s.0.n_prompts())
}

/// Vocabulary size, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn tl_suite_vocab_size(suite: *const TlSuite) -> usize {
    suite.as_ref().map_or(0, |s| s.0.vocab().size())
}

/// Scores a response to `prompt`.
#[no_mangle]
pub unsafe extern "C" fn tl_suite_score(
    suite: *const TlSuite,
    prompt: usize,
    tokens: *const u32,
    n_tokens: usize,
    score: *mut TlScore,
) -> TlStatus {
    guard(|| {
        let s = suite.as_ref().ok_or_else(|| null("suite"))?;
        let toks = slice(tokens, n_tokens, "tokens")?;
        let dst = out(score, "score")?;
        let r = s.0.score(prompt, toks)?;
        *dst = TlScore {
            reward: r.reward,
            valid: r.valid,
            correct: r.correct,
        };
        Ok(())
    })
}

/// Task-shaped starting policy for `suite` with default prior settings.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_new_base(
    suite: *const TlSuite,
    kind: TlPolicyKind,
    seed: u64,
    policy: *mut *mut TlPolicy,
) -> TlStatus {
    guard(|| {
        let s = suite.as_ref().ok_or_else(|| null("suite"))?;
        let slot = out(policy, "policy")?;
        let kind = match kind {
            TlPolicyKind::Tabular => PolicyKind::Tabular,
            TlPolicyKind::FeatureLinear => PolicyKind::FeatureLinear,
        };
        let p = base_policy(&s.0, kind, &BasePolicyConfig::default(), seed)?;
        *slot = Box::into_raw(Box::new(TlPolicy(p)));
        Ok(())
    })
}

/// Loads a policy JSON written by the `taperlab` binary.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_load(file: *const c_char, policy: *mut *mut TlPolicy) -> TlStatus {
    guard(|| {
        let p = path(file, "file")?;
        let slot = out(policy, "policy")?;
        *slot = Box::into_raw(Box::new(TlPolicy(load_policy(p)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tl_policy_free(policy: *mut TlPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Length of the parameter vector, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_num_params(policy: *const TlPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.0.num_params())
}

/// Natural-log probability of `tokens` as a complete response to `prompt`.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_log_prob(
    policy: *const TlPolicy,
    prompt: usize,
    tokens: *const u32,
    n_tokens: usize,
    result: *mut f64,
) -> TlStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let toks = slice(tokens, n_tokens, "tokens")?;
        let r = out(result, "result")?;
        *r = p.0.log_prob(prompt, toks)?;
        Ok(())
    })
}

/// Samples one response of at most `max_len` tokens with a seeded generator.
///
/// `tokens` must hold `capacity` entries; `max_len` entries always suffice.
/// `n_tokens` receives the response length, and `log_prob` (if non-null) its
/// log-probability.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_sample(
    policy: *const TlPolicy,
    prompt: usize,
    max_len: usize,
    seed: u64,
    tokens: *mut u32,
    capacity: usize,
    n_tokens: *mut usize,
    log_prob: *mut f64,
) -> TlStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let len = out(n_tokens, "n_tokens")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = p.0.sample_trajectory(prompt, max_len, &mut rng)?;
        *len = traj.len();
        if traj.len() > capacity {
            return Err(Failure(
                TlStatus::BufferTooSmall,
                format!("response has {} tokens, buffer holds {capacity}", traj.len()),
            ));
        }
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        std::slice::from_raw_parts_mut(tokens, traj.len()).copy_from_slice(&traj.tokens);
        if let Some(lp) = log_prob.as_mut() {
            *lp = traj.log_mu;
        }
        Ok(())
    })
}

/// Exact expected reward of `policy` averaged over the prompts of `suite`.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_expected_reward(
    policy: *const TlPolicy,
    suite: *const TlSuite,
    result: *mut f64,
) -> TlStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let s = suite.as_ref().ok_or_else(|| null("suite"))?;
        let r = out(result, "result")?;
        *r = s.0.expected_reward(&p.0)?;
        Ok(())
    })
}

/// Single-trajectory gradient estimate of `method` with its default limits.
///
/// The response was drawn by a reference policy with log-probability
/// `log_mu` and scored `reward`; positivity follows the sign of `reward`.
/// `grad` must hold `tl_policy_num_params` entries.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_gradient(
    policy: *const TlPolicy,
    method: TlMethod,
    baseline: f64,
    prompt: usize,
    tokens: *const u32,
    n_tokens: usize,
    log_mu: f64,
    reward: f64,
    grad: *mut f64,
    capacity: usize,
) -> TlStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let toks: Vec<TokenId> = slice(tokens, n_tokens, "tokens")?.to_vec();
        let n = p.0.num_params();
        if capacity < n {
            return Err(Failure(
                TlStatus::BufferTooSmall,
                format!("gradient has {n} entries, buffer holds {capacity}"),
            ));
        }
        if grad.is_null() {
            return Err(null("grad"));
        }
        let kind = match method {
            TlMethod::Sft => MethodKind::Sft,
            TlMethod::Naive => MethodKind::Naive,
            TlMethod::Opr => MethodKind::Opr,
            TlMethod::Tis => MethodKind::Tis,
            TlMethod::Topr => MethodKind::Topr,
            TlMethod::Ppo => MethodKind::Ppo,
        };
        let cfg = MethodConfig::new(kind).with_baseline(baseline);
        cfg.validate()?;
        let positive = reward > 0.0;
        let traj = Trajectory::new(prompt, toks, log_mu, reward, positive, positive)?;
        let est = per_trajectory_gradient(&cfg, &p.0, &traj)?;
        std::slice::from_raw_parts_mut(grad, n).copy_from_slice(&est.grad);
        Ok(())
    })
}

/// Runs every method of a TOML experiment config and writes the artifacts
/// under `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn tl_run_experiment(config_path: *const c_char, out_dir: *const c_char) -> TlStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(path(config_path, "config_path")?)?;
        run_experiment(&cfg, path(out_dir, "out_dir")?)?;
        Ok(())
    })
}
