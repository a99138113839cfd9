//! Truncated importance-sampling policy gradients and their surrogates.
//!
//! Every single-trajectory estimator in the family has the form
//!
//! ```text
//! w · (R(τ) − c) · ∇ log π(τ),     w = clip(π(τ)/μ(τ), a, b)
//! ```
//!
//! where `(a, b)` is `(a⁺, b⁺)` when `R − c ≥ 0` and `(a⁻, b⁻)` otherwise and
//! `w` is held constant. The same gradient is obtained by differentiating the
//! surrogate `Σ μ(τ) ρ(π(τ)/μ(τ), a, b) (R(τ) − c)` with the taper function
//! `ρ`, because `ρ'(x) = clip(x, a, b) / x`.
//!
//! PPO and DPO are provided as comparison objectives with their exact
//! gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sigmoid, sigmoid, CompensatedSum, VectorAccumulator};
use crate::oracle::EnumeratedSupport;
use crate::policy::{PolicyParams, SparseGrad, Trajectory};

/// Importance-ratio exponents are clamped to this magnitude before `exp`.
pub const MAX_LOG_RATIO: f64 = 500.0;

/// `min(max(x, a), b)`.
pub fn clip_ratio(x: f64, a: f64, b: f64) -> Result<f64> {
    if a.is_nan() || b.is_nan() || a > b {
        return Err(Error::InvalidArgument(format!(
            "clip interval [{a}, {b}] is empty"
        )));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "importance ratio must be non-negative, got {x}"
        )));
    }
    Ok(clip(x, a, b))
}

#[inline]
fn clip(x: f64, a: f64, b: f64) -> f64 {
    x.max(a).min(b)
}

/// The taper function: identity on `[a, b]`, continued logarithmically
/// outside so that its derivative is `clip(x, a, b) / x`.
pub fn taper(x: f64, a: f64, b: f64) -> Result<f64> {
    if a.is_nan() || a < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "taper lower limit must be non-negative, got {a}"
        )));
    }
    if b.is_nan() || a > b {
        return Err(Error::InvalidArgument(format!(
            "taper interval [{a}, {b}] is empty"
        )));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "taper argument must be non-negative, got {x}"
        )));
    }
    Ok(taper_unchecked(x, a, b))
}

fn taper_unchecked(x: f64, a: f64, b: f64) -> f64 {
    if x < a {
        if x == 0.0 {
            f64::NEG_INFINITY
        } else {
            a * (1.0 + (x / a).ln())
        }
    } else if x > b {
        // b(1 + log(x/b)) → 0 as b → 0⁺
        if b == 0.0 {
            0.0
        } else {
            b * (1.0 + (x / b).ln())
        }
    } else {
        x
    }
}

/// `d/dx taper(x, a, b)` for `x > 0`.
pub fn taper_derivative(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "taper derivative needs x > 0, got {x}"
        )));
    }
    Ok(clip_ratio(x, a, b)? / x)
}

/// Clip limits for positive and negative trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationLimits {
    pub a_plus: f64,
    pub b_plus: f64,
    pub a_minus: f64,
    pub b_minus: f64,
}

impl TruncationLimits {
    pub fn new(a_plus: f64, b_plus: f64, a_minus: f64, b_minus: f64) -> Result<Self> {
        let limits = Self {
            a_plus,
            b_plus,
            a_minus,
            b_minus,
        };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a, b) in [
            ("positive", self.a_plus, self.b_plus),
            ("negative", self.a_minus, self.b_minus),
        ] {
            if !(a >= 0.0) || a.is_infinite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} lower limit must be finite and non-negative, got {a}"
                )));
            }
            if b.is_nan() || a > b {
                return Err(Error::InvalidArgument(format!(
                    "{name} limits [{a}, {b}] are not ordered"
                )));
            }
        }
        Ok(())
    }

    /// `(a, b)` for the branch selected by the sign of the shifted reward.
    pub fn branch(&self, positive: bool) -> (f64, f64) {
        if positive {
            (self.a_plus, self.b_plus)
        } else {
            (self.a_minus, self.b_minus)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Sft,
    Naive,
    Opr,
    Tis,
    Topr,
    Ppo,
    Dpo,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Sft,
        MethodKind::Naive,
        MethodKind::Opr,
        MethodKind::Tis,
        MethodKind::Topr,
        MethodKind::Ppo,
        MethodKind::Dpo,
    ];

    /// Kinds parameterized by truncation limits.
    pub fn is_truncated(self) -> bool {
        !matches!(self, MethodKind::Ppo | MethodKind::Dpo)
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Sft => "sft",
            MethodKind::Naive => "naive",
            MethodKind::Opr => "opr",
            MethodKind::Tis => "tis",
            MethodKind::Topr => "topr",
            MethodKind::Ppo => "ppo",
            MethodKind::Dpo => "dpo",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// Truncation limits of the named presets.
pub fn method_preset(kind: MethodKind) -> Result<TruncationLimits> {
    let inf = f64::INFINITY;
    let (ap, bp, am, bm) = match kind {
        MethodKind::Sft => (1.0, 1.0, 0.0, 0.0),
        MethodKind::Naive => (1.0, 1.0, 1.0, 1.0),
        MethodKind::Opr => (0.0, inf, 0.0, inf),
        MethodKind::Tis => (0.0, 1.0, 0.0, 1.0),
        MethodKind::Topr => (1.0, 1.0, 0.0, 1.0),
        MethodKind::Ppo | MethodKind::Dpo => {
            return Err(Error::InvalidArgument(format!(
                "{kind} is not parameterized by truncation limits"
            )))
        }
    };
    Ok(TruncationLimits {
        a_plus: ap,
        b_plus: bp,
        a_minus: am,
        b_minus: bm,
    })
}

pub const DEFAULT_PPO_EPSILON: f64 = 0.2;
pub const DEFAULT_DPO_BETA: f64 = 0.1;

/// One point of the estimator family. When read from a file, omitted
/// kind-specific fields take the defaults of [`MethodConfig::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MethodConfigFile")]
pub struct MethodConfig {
    pub kind: MethodKind,
    /// Present exactly for the truncated kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<TruncationLimits>,
    #[serde(default)]
    pub baseline: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppo_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpo_beta: Option<f64>,
    /// Divide each trajectory's contribution by its token count.
    #[serde(default = "default_true")]
    pub length_normalize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodConfigFile {
    kind: MethodKind,
    #[serde(default)]
    limits: Option<TruncationLimits>,
    #[serde(default)]
    baseline: f64,
    #[serde(default)]
    ppo_epsilon: Option<f64>,
    #[serde(default)]
    dpo_beta: Option<f64>,
    #[serde(default = "default_true")]
    length_normalize: bool,
}

impl From<MethodConfigFile> for MethodConfig {
    fn from(f: MethodConfigFile) -> Self {
        let defaults = MethodConfig::new(f.kind);
        Self {
            kind: f.kind,
            limits: f.limits.or(defaults.limits),
            baseline: f.baseline,
            ppo_epsilon: f.ppo_epsilon.or(defaults.ppo_epsilon),
            dpo_beta: f.dpo_beta.or(defaults.dpo_beta),
            length_normalize: f.length_normalize,
        }
    }
}

impl MethodConfig {
    /// Default configuration of `kind`: preset limits, PPO ε = 0.2,
    /// DPO β = 0.1, no baseline, length normalization on.
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            limits: method_preset(kind).ok(),
            baseline: 0.0,
            ppo_epsilon: (kind == MethodKind::Ppo).then_some(DEFAULT_PPO_EPSILON),
            dpo_beta: (kind == MethodKind::Dpo).then_some(DEFAULT_DPO_BETA),
            length_normalize: true,
        }
    }

    pub fn with_baseline(mut self, c: f64) -> Self {
        self.baseline = c;
        self
    }

    pub fn with_limits(mut self, limits: TruncationLimits) -> Self {
        self.limits = Some(limits);
        self
    }

    pub fn with_length_normalize(mut self, on: bool) -> Self {
        self.length_normalize = on;
        self
    }

    pub fn with_ppo_epsilon(mut self, eps: f64) -> Self {
        self.ppo_epsilon = Some(eps);
        self
    }

    pub fn with_dpo_beta(mut self, beta: f64) -> Self {
        self.dpo_beta = Some(beta);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.baseline.is_finite() {
            return Err(Error::Config(format!("baseline must be finite, got {}", self.baseline)));
        }
        match (self.kind.is_truncated(), self.limits) {
            (true, Some(l)) => l.validate()?,
            (true, None) => {
                return Err(Error::Config(format!("{} requires truncation limits", self.kind)))
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!("{} does not take truncation limits", self.kind)))
            }
            (false, None) => {}
        }
        match (self.kind, self.ppo_epsilon) {
            (MethodKind::Ppo, Some(e)) if e > 0.0 && e < 1.0 => {}
            (MethodKind::Ppo, e) => {
                return Err(Error::Config(format!("ppo needs epsilon in (0, 1), got {e:?}")))
            }
            (_, Some(_)) => return Err(Error::Config("ppo_epsilon is only valid for ppo".into())),
            (_, None) => {}
        }
        match (self.kind, self.dpo_beta) {
            (MethodKind::Dpo, Some(b)) if b > 0.0 && b.is_finite() => {}
            (MethodKind::Dpo, b) => {
                return Err(Error::Config(format!("dpo needs beta > 0, got {b:?}")))
            }
            (_, Some(_)) => return Err(Error::Config("dpo_beta is only valid for dpo".into())),
            (_, None) => {}
        }
        Ok(())
    }

    fn limits(&self) -> Result<TruncationLimits> {
        self.limits
            .ok_or_else(|| Error::Config(format!("{} requires truncation limits", self.kind)))
    }

    fn length_scale(&self, traj: &Trajectory) -> f64 {
        if self.length_normalize {
            1.0 / traj.tokens.len() as f64
        } else {
            1.0
        }
    }
}

/// Per-estimate diagnostics. For sums over several trajectories the ratio
/// and clip fields are averages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mean_ratio: f64,
    pub mean_weight: f64,
    /// Fraction of trajectories whose ratio fell below the active lower limit.
    pub clip_frac_low: f64,
    /// Fraction of trajectories whose ratio exceeded the active upper limit.
    pub clip_frac_high: f64,
    /// Any ratio exponent hit the ±500 clamp.
    pub exponent_clamped: bool,
    /// Contribution to the surrogate objective.
    pub surrogate: f64,
    pub count: usize,
}

impl Diagnostics {
    /// Averages ratio/clip fields and sums surrogate contributions.
    pub fn combine<'a, I: IntoIterator<Item = &'a Diagnostics>>(items: I) -> Diagnostics {
        let mut out = Diagnostics::default();
        let mut surrogate = CompensatedSum::new();
        for d in items {
            let n = d.count as f64;
            out.mean_ratio += d.mean_ratio * n;
            out.mean_weight += d.mean_weight * n;
            out.clip_frac_low += d.clip_frac_low * n;
            out.clip_frac_high += d.clip_frac_high * n;
            out.exponent_clamped |= d.exponent_clamped;
            surrogate.add(d.surrogate);
            out.count += d.count;
        }
        if out.count > 0 {
            let n = out.count as f64;
            out.mean_ratio /= n;
            out.mean_weight /= n;
            out.clip_frac_low /= n;
            out.clip_frac_high /= n;
        }
        out.surrogate = surrogate.value();
        out
    }
}

/// A gradient estimate aligned with the policy's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Sparse form used on the training hot path.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    pub grad: SparseGrad,
    /// Multiplier already folded into `grad` relative to `∇ log π`.
    pub coefficient: f64,
    pub diagnostics: Diagnostics,
}

impl SparseEstimate {
    pub fn into_dense(self, num_params: usize) -> GradientEstimate {
        GradientEstimate {
            grad: self.grad.to_dense(num_params),
            diagnostics: self.diagnostics,
        }
    }
}

/// Input of an estimator: one trajectory, or a (winner, loser) pair for DPO.
#[derive(Debug, Clone, Copy)]
pub enum Sample<'a> {
    Single(&'a Trajectory),
    Pair {
        winner: &'a Trajectory,
        loser: &'a Trajectory,
    },
}

/// `π(τ)/μ(τ)` from log-probabilities, with the exponent clamped.
pub fn importance_ratio(log_pi: f64, traj: &Trajectory) -> Result<(f64, bool)> {
    let exponent = log_pi - traj.log_mu;
    if !exponent.is_finite() {
        return Err(Error::NonFinite(format!(
            "log-ratio {exponent} for trajectory {:?} of prompt {} (log π = {log_pi}, log μ = {})",
            traj.tokens, traj.prompt_id, traj.log_mu
        )));
    }
    let clamped = exponent.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
    Ok((clamped.exp(), clamped != exponent))
}

struct Scalars {
    coefficient: f64,
    diagnostics: Diagnostics,
}

/// Scalar part of a single-trajectory estimator: the multiplier of
/// `∇ log π(τ)` and the surrogate contribution.
fn single_scalars(cfg: &MethodConfig, log_pi: f64, traj: &Trajectory) -> Result<Scalars> {
    let (ratio, exponent_clamped) = importance_ratio(log_pi, traj)?;
    let advantage = traj.reward - cfg.baseline;
    let scale = cfg.length_scale(traj);
    let (coefficient, weight, surrogate, low, high) = match cfg.kind {
        MethodKind::Sft | MethodKind::Naive | MethodKind::Opr | MethodKind::Tis | MethodKind::Topr => {
            let limits = cfg.limits()?;
            // ties take the positive branch; their gradient is zero either way
            let (a, b) = limits.branch(advantage >= 0.0);
            let weight = clip(ratio, a, b);
            let surrogate = if advantage == 0.0 {
                0.0
            } else {
                taper_unchecked(ratio, a, b) * advantage * scale
            };
            (weight * advantage * scale, weight, surrogate, ratio < a, ratio > b)
        }
        MethodKind::Ppo => {
            let eps = cfg
                .ppo_epsilon
                .ok_or_else(|| Error::Config("ppo needs epsilon".into()))?;
            let (lo, hi) = (1.0 - eps, 1.0 + eps);
            let active = if advantage > 0.0 {
                ratio <= hi
            } else if advantage < 0.0 {
                ratio >= lo
            } else {
                true
            };
            let unclipped = ratio * advantage;
            let clipped = clip(ratio, lo, hi) * advantage;
            let coefficient = if active { advantage * ratio * scale } else { 0.0 };
            (
                coefficient,
                if active { ratio } else { 0.0 },
                unclipped.min(clipped) * scale,
                ratio < lo,
                ratio > hi,
            )
        }
        MethodKind::Dpo => return Err(Error::PairRequired("dpo")),
    };
    Ok(Scalars {
        coefficient,
        diagnostics: Diagnostics {
            mean_ratio: ratio,
            mean_weight: weight,
            clip_frac_low: f64::from(u8::from(low)),
            clip_frac_high: f64::from(u8::from(high)),
            exponent_clamped,
            surrogate,
            count: 1,
        },
    })
}

/// Gradient of one estimator sample in sparse form.
pub fn estimate_sparse(cfg: &MethodConfig, policy: &PolicyParams, sample: Sample<'_>) -> Result<SparseEstimate> {
    match sample {
        Sample::Single(traj) => {
            if cfg.kind == MethodKind::Dpo {
                return Err(Error::PairRequired("dpo"));
            }
            let (log_pi, mut grad) = policy.log_prob_sparse(traj.prompt_id, &traj.tokens)?;
            let s = single_scalars(cfg, log_pi, traj)?;
            for e in &mut grad.entries {
                e.1 *= s.coefficient;
            }
            Ok(SparseEstimate {
                grad,
                coefficient: s.coefficient,
                diagnostics: s.diagnostics,
            })
        }
        Sample::Pair { winner, loser } => {
            if cfg.kind != MethodKind::Dpo {
                return Err(Error::InvalidArgument(format!(
                    "{} takes single trajectories, not pairs",
                    cfg.kind
                )));
            }
            dpo_pair(cfg, policy, winner, loser)
        }
    }
}

fn dpo_pair(cfg: &MethodConfig, policy: &PolicyParams, winner: &Trajectory, loser: &Trajectory) -> Result<SparseEstimate> {
    let beta = cfg
        .dpo_beta
        .ok_or_else(|| Error::Config("dpo needs beta".into()))?;
    let (lp_w, g_w) = policy.log_prob_sparse(winner.prompt_id, &winner.tokens)?;
    let (lp_l, g_l) = policy.log_prob_sparse(loser.prompt_id, &loser.tokens)?;
    let (r_w, clamp_w) = importance_ratio(lp_w, winner)?;
    let (r_l, clamp_l) = importance_ratio(lp_l, loser)?;
    let margin = beta * ((lp_w - winner.log_mu) - (lp_l - loser.log_mu));
    // d/dθ log σ(m) = σ(−m) · β (∇ log π_w − ∇ log π_l)
    let coefficient = beta * sigmoid(-margin);
    let mut entries = Vec::with_capacity(g_w.entries.len() + g_l.entries.len());
    entries.extend(g_w.entries.iter().map(|&(i, g)| (i, coefficient * g)));
    entries.extend(g_l.entries.iter().map(|&(i, g)| (i, -coefficient * g)));
    Ok(SparseEstimate {
        grad: SparseGrad { entries },
        coefficient,
        diagnostics: Diagnostics {
            mean_ratio: 0.5 * (r_w + r_l),
            mean_weight: coefficient,
            clip_frac_low: 0.0,
            clip_frac_high: 0.0,
            exponent_clamped: clamp_w || clamp_l,
            surrogate: log_sigmoid(margin),
            count: 1,
        },
    })
}

/// Gradient estimate contributed by a single trajectory.
pub fn per_trajectory_gradient(cfg: &MethodConfig, policy: &PolicyParams, traj: &Trajectory) -> Result<GradientEstimate> {
    Ok(estimate_sparse(cfg, policy, Sample::Single(traj))?.into_dense(policy.num_params()))
}

/// DPO gradient of one (winner, loser) pair.
pub fn pair_gradient(
    cfg: &MethodConfig,
    policy: &PolicyParams,
    winner: &Trajectory,
    loser: &Trajectory,
) -> Result<GradientEstimate> {
    Ok(estimate_sparse(cfg, policy, Sample::Pair { winner, loser })?.into_dense(policy.num_params()))
}

/// Expected surrogate objective over an enumerated support.
///
/// For the truncated kinds this is `Σ w(τ) ρ(π/μ, a, b) (R − c)`, with `w`
/// the support weight (normally `μ`). PPO uses its clipped objective; DPO
/// averages `log σ` over independent within-prompt (positive, negative)
/// pairs.
pub fn expected_surrogate(cfg: &MethodConfig, policy: &PolicyParams, support: &EnumeratedSupport) -> Result<f64> {
    support.check_normalized(1e-8)?;
    if cfg.kind == MethodKind::Dpo {
        let mut acc = CompensatedSum::new();
        for (wt, w, l) in support.dpo_pairs() {
            let s = dpo_pair(cfg, policy, &w, &l)?;
            acc.add(wt * s.diagnostics.surrogate);
        }
        return Ok(acc.value());
    }
    let mut acc = CompensatedSum::new();
    for entry in support.entries() {
        if entry.weight == 0.0 {
            continue;
        }
        let traj = entry.to_trajectory();
        let log_pi = policy.log_prob(traj.prompt_id, &traj.tokens)?;
        let s = single_scalars(cfg, log_pi, &traj)?;
        acc.add(entry.weight * s.diagnostics.surrogate);
    }
    Ok(acc.value())
}

/// Expected estimator gradient `Σ w(τ) ĝ(τ)` over an enumerated support
/// (within-prompt pairs for DPO).
pub fn expected_gradient(cfg: &MethodConfig, policy: &PolicyParams, support: &EnumeratedSupport) -> Result<Vec<f64>> {
    let mut acc = VectorAccumulator::zeros(policy.num_params());
    if cfg.kind == MethodKind::Dpo {
        for (wt, w, l) in support.dpo_pairs() {
            let s = dpo_pair(cfg, policy, &w, &l)?;
            s.grad.accumulate(&mut acc, wt);
        }
        return Ok(acc.into_vec());
    }
    for entry in support.entries() {
        if entry.weight == 0.0 {
            continue;
        }
        let traj = entry.to_trajectory();
        let s = estimate_sparse(cfg, policy, Sample::Single(&traj))?;
        s.grad.accumulate(&mut acc, entry.weight);
    }
    Ok(acc.into_vec())
}

/// Terms of the implicit naive-REINFORCE loss
/// `L = C + R⁺ KL(μ_R⁺‖π) − R⁻ KL(μ_R⁻‖π) − c KL(μ‖π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveLossDecomposition {
    /// π-independent constant.
    pub constant: f64,
    /// `R⁺ · KL(μ_R⁺ ‖ π)`.
    pub pos_term: f64,
    /// `−R⁻ · KL(μ_R⁻ ‖ π)`.
    pub neg_term: f64,
    /// `KL(μ ‖ π)` (enters the loss multiplied by `−c`).
    pub kl_mu_pi: f64,
    pub baseline: f64,
    /// Sum of the four parts.
    pub total: f64,
}

/// `−J_{μ,c}(π)` computed directly, with `J_{μ,c}(μ) = J(μ)`.
pub fn naive_loss_direct(policy: &PolicyParams, support: &EnumeratedSupport, c: f64) -> Result<f64> {
    support.check_normalized(1e-8)?;
    let mut j_mu = CompensatedSum::new();
    let mut shift = CompensatedSum::new();
    for e in support.entries().iter().filter(|e| e.weight > 0.0) {
        let log_pi = checked_log_pi(policy, e)?;
        j_mu.add(e.weight * e.reward);
        shift.add(e.weight * (e.reward - c) * (log_pi - e.weight.ln()));
    }
    Ok(-(j_mu.value() + shift.value()))
}

fn checked_log_pi(policy: &PolicyParams, e: &crate::oracle::SupportEntry) -> Result<f64> {
    let log_pi = policy.log_prob(e.prompt_id, &e.tokens)?;
    if log_pi.exp() == 0.0 {
        return Err(Error::DegeneratePolicy(format!(
            "π assigns zero probability to supported trajectory {:?}; KL is undefined",
            e.tokens
        )));
    }
    Ok(log_pi)
}

/// Four-part decomposition of the implicit naive-REINFORCE loss. The support
/// weights play the role of `μ`.
pub fn naive_loss_decomposition(policy: &PolicyParams, support: &EnumeratedSupport, c: f64) -> Result<NaiveLossDecomposition> {
    support.check_normalized(1e-8)?;
    let entries: Vec<_> = support.entries().iter().filter(|e| e.weight > 0.0).collect();
    let log_pis = entries
        .iter()
        .map(|e| checked_log_pi(policy, e))
        .collect::<Result<Vec<_>>>()?;

    let r_plus: f64 = crate::numeric::compensated_sum(
        entries.iter().filter(|e| e.reward >= 0.0).map(|e| e.weight * e.reward),
    );
    let r_minus: f64 = crate::numeric::compensated_sum(
        entries.iter().filter(|e| e.reward < 0.0).map(|e| e.weight * e.reward.abs()),
    );

    // KL(μ_R± ‖ π) and the entropy-like parts that go into the constant
    let mut kl_plus = CompensatedSum::new();
    let mut kl_minus = CompensatedSum::new();
    let mut ent_plus = CompensatedSum::new();
    let mut ent_minus = CompensatedSum::new();
    let mut kl_mu = CompensatedSum::new();
    let mut j_mu = CompensatedSum::new();
    let mut r_log_mu = CompensatedSum::new();
    for (e, &log_pi) in entries.iter().zip(&log_pis) {
        let log_mu = e.weight.ln();
        kl_mu.add(e.weight * (log_mu - log_pi));
        j_mu.add(e.weight * e.reward);
        r_log_mu.add(e.weight * e.reward * log_mu);
        if e.reward > 0.0 && r_plus > 0.0 {
            let q = e.weight * e.reward / r_plus;
            kl_plus.add(q * (q.ln() - log_pi));
            ent_plus.add(-q * q.ln());
        } else if e.reward < 0.0 && r_minus > 0.0 {
            let q = e.weight * e.reward.abs() / r_minus;
            kl_minus.add(q * (q.ln() - log_pi));
            ent_minus.add(-q * q.ln());
        }
    }
    let constant = -j_mu.value() + r_plus * ent_plus.value() - r_minus * ent_minus.value() + r_log_mu.value();
    let pos_term = r_plus * kl_plus.value();
    let neg_term = -r_minus * kl_minus.value();
    let kl_mu_pi = kl_mu.value();
    let total = constant + pos_term + neg_term - c * kl_mu_pi;
    Ok(NaiveLossDecomposition {
        constant,
        pos_term,
        neg_term,
        kl_mu_pi,
        baseline: c,
        total,
    })
}

/// Correction term relating the expected clipped gradient with baseline `c`
/// to the one without:
/// `∇J(π, c) = ∇J(π, 0) + c Σ μ (π/μ − clip(π/μ, 0, b)) ∇ log π`.
///
/// Only defined for shared limits `a⁺ = a⁻ = 0`, `b⁺ = b⁻ = b`.
pub fn baseline_gradient_identity_term(
    policy: &PolicyParams,
    support: &EnumeratedSupport,
    c: f64,
    limits: &TruncationLimits,
) -> Result<Vec<f64>> {
    limits.validate()?;
    if limits.a_plus != 0.0 || limits.a_minus != 0.0 || limits.b_plus != limits.b_minus {
        return Err(Error::InvalidArgument(
            "the baseline identity needs a⁺ = a⁻ = 0 and b⁺ = b⁻".into(),
        ));
    }
    support.check_normalized(1e-8)?;
    let b = limits.b_plus;
    let mut acc = VectorAccumulator::zeros(policy.num_params());
    if c == 0.0 {
        return Ok(acc.into_vec());
    }
    for e in support.entries().iter().filter(|e| e.weight > 0.0) {
        let traj = e.to_trajectory();
        let (log_pi, grad) = policy.log_prob_sparse(e.prompt_id, &e.tokens)?;
        let (ratio, _) = importance_ratio(log_pi, &traj)?;
        let excess = ratio - clip(ratio, 0.0, b);
        if excess != 0.0 {
            grad.accumulate(&mut acc, c * e.weight * excess);
        }
    }
    Ok(acc.into_vec())
}
