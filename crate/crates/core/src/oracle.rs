//! Exact-enumeration oracles.
//!
//! Small policies can be checked against exhaustive sums over every
//! trajectory. An [`EnumeratedSupport`] lists those trajectories with a data
//! weight (normally `μ(τ)` times the prompt probability) and the behavior
//! log-probability used in importance ratios. The two are kept apart so that
//! a support can be reweighted without changing `μ`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{CompensatedSum, VectorAccumulator};
use crate::objectives::{estimate_sparse, expected_gradient, expected_surrogate, MethodConfig, MethodKind, Sample};
use crate::policy::{PolicyParams, PromptId, TokenId, Trajectory};
use crate::task::TaskSuite;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    pub prompt_id: PromptId,
    pub tokens: Vec<TokenId>,
    /// Probability of the entry under the data distribution.
    pub weight: f64,
    /// `log μ(τ)` of the behavior policy.
    pub log_mu: f64,
    pub reward: f64,
    pub valid: bool,
    pub correct: bool,
}

impl SupportEntry {
    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory {
            prompt_id: self.prompt_id,
            tokens: self.tokens.clone(),
            log_mu: self.log_mu,
            reward: self.reward,
            valid: self.valid,
            correct: self.correct,
        }
    }
}

/// Every trajectory of one or more prompts with its data weight.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedSupport {
    entries: Vec<SupportEntry>,
}

impl EnumeratedSupport {
    pub fn new(entries: Vec<SupportEntry>) -> Result<Self> {
        for e in &entries {
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "support weight must be finite and non-negative, got {} for {:?}",
                    e.weight, e.tokens
                )));
            }
            if !e.reward.is_finite() {
                return Err(Error::NonFinite(format!("reward of {:?}", e.tokens)));
            }
            if e.weight > 0.0 && !e.log_mu.is_finite() {
                return Err(Error::NonFinite(format!("log μ of supported trajectory {:?}", e.tokens)));
            }
            if e.tokens.is_empty() {
                return Err(Error::InvalidArgument("support trajectories must be non-empty".into()));
            }
        }
        Ok(Self { entries })
    }

    /// Full support of `mu` on one prompt, with rewards from `reward`.
    pub fn from_policy<F>(mu: &PolicyParams, prompt: PromptId, max_len: usize, reward: F) -> Result<Self>
    where
        F: Fn(&[TokenId]) -> f64,
    {
        let mut entries = Vec::new();
        push_prompt(mu, prompt, max_len, 1.0, &mut entries, |tokens| {
            let r = reward(tokens);
            Ok((r, true, r > 0.0))
        })?;
        Self::new(entries)
    }

    /// Full support of `mu` over every prompt of `suite`, prompts uniform.
    pub fn from_suite(mu: &PolicyParams, suite: &TaskSuite) -> Result<Self> {
        let n = suite.n_prompts();
        let mut entries = Vec::new();
        for p in 0..n {
            push_prompt(mu, p, suite.max_len(), 1.0 / n as f64, &mut entries, |tokens| {
                let s = suite.score(p, tokens)?;
                Ok((s.reward, s.valid, s.correct))
            })?;
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[SupportEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        crate::numeric::compensated_sum(self.entries.iter().map(|e| e.weight))
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let total = self.total_mass();
        if (total - 1.0).abs() > tol {
            return Err(Error::UnnormalizedSupport { total });
        }
        Ok(())
    }

    /// Mass of entries with positive reward.
    pub fn positive_mass(&self) -> f64 {
        crate::numeric::compensated_sum(self.entries.iter().filter(|e| e.reward > 0.0).map(|e| e.weight))
    }

    /// Data weights rescaled so that positives carry `target` of the mass.
    /// Behavior log-probabilities are unchanged.
    pub fn reweighted(&self, target: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::InvalidArgument(format!(
                "target positive mass must be in [0, 1], got {target}"
            )));
        }
        let p = self.positive_mass();
        let total = self.total_mass();
        let neg = total - p;
        if (target > 0.0 && p == 0.0) || (target < 1.0 && neg == 0.0) {
            return Err(Error::Insufficient {
                what: "entries of the needed sign",
                needed: 1,
                available: 0,
            });
        }
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.weight *= if e.reward > 0.0 { target / p } else { (1.0 - target) / neg };
                e
            })
            .collect();
        Self::new(entries)
    }

    /// Mass of each prompt.
    pub fn prompt_masses(&self) -> BTreeMap<PromptId, f64> {
        let mut out: BTreeMap<PromptId, CompensatedSum> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.prompt_id).or_default().add(e.weight);
        }
        out.into_iter().map(|(k, v)| (k, v.value())).collect()
    }

    /// Within-prompt (positive, negative) pairs with their joint weight
    /// `P(p) · w(τ⁺|p, +) · w(τ⁻|p, −)`. Prompts lacking either sign
    /// contribute nothing.
    pub fn dpo_pairs(&self) -> Vec<(f64, Trajectory, Trajectory)> {
        let mut by_prompt: BTreeMap<PromptId, Vec<&SupportEntry>> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.weight > 0.0) {
            by_prompt.entry(e.prompt_id).or_default().push(e);
        }
        let mut out = Vec::new();
        for entries in by_prompt.values() {
            let pos: Vec<_> = entries.iter().filter(|e| e.reward > 0.0).collect();
            let neg: Vec<_> = entries.iter().filter(|e| e.reward <= 0.0).collect();
            let wp: f64 = pos.iter().map(|e| e.weight).sum();
            let wn: f64 = neg.iter().map(|e| e.weight).sum();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let mass = wp + wn;
            for w in &pos {
                for l in &neg {
                    out.push((mass * (w.weight / wp) * (l.weight / wn), w.to_trajectory(), l.to_trajectory()));
                }
            }
        }
        out
    }
}

fn push_prompt<F>(
    mu: &PolicyParams,
    prompt: PromptId,
    max_len: usize,
    prompt_mass: f64,
    out: &mut Vec<SupportEntry>,
    score: F,
) -> Result<()>
where
    F: Fn(&[TokenId]) -> Result<(f64, bool, bool)>,
{
    for (tokens, _) in mu.enumerate_support(prompt, max_len)? {
        let log_mu = mu.log_prob(prompt, &tokens)?;
        let (reward, valid, correct) = score(&tokens)?;
        out.push(SupportEntry {
            prompt_id: prompt,
            weight: prompt_mass * log_mu.exp(),
            log_mu,
            reward,
            valid,
            correct,
            tokens,
        });
    }
    Ok(())
}

/// `J(π) = Σ_p P(p) Σ_τ π(τ|p) R(τ)` over the prompts and trajectories of a
/// full support.
pub fn exact_objective(policy: &PolicyParams, support: &EnumeratedSupport) -> Result<f64> {
    Ok(exact_objective_inner(policy, support, false)?.0)
}

fn exact_objective_inner(policy: &PolicyParams, support: &EnumeratedSupport, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    support.check_normalized(1e-8)?;
    let masses = support.prompt_masses();
    let mut value = CompensatedSum::new();
    let mut grad = VectorAccumulator::zeros(if with_grad { policy.num_params() } else { 0 });
    let mut pi_mass: BTreeMap<PromptId, CompensatedSum> = BTreeMap::new();
    for e in support.entries() {
        let mass = masses[&e.prompt_id];
        if mass == 0.0 {
            continue;
        }
        let (lp, g) = if with_grad {
            let (lp, g) = policy.log_prob_sparse(e.prompt_id, &e.tokens)?;
            (lp, Some(g))
        } else {
            (policy.log_prob(e.prompt_id, &e.tokens)?, None)
        };
        let pi = lp.exp();
        pi_mass.entry(e.prompt_id).or_default().add(pi);
        value.add(mass * pi * e.reward);
        if let Some(g) = g {
            g.accumulate(&mut grad, mass * pi * e.reward);
        }
    }
    for (p, m) in pi_mass {
        if (m.value() - 1.0).abs() > 1e-8 {
            return Err(Error::UnnormalizedSupport { total: m.value() }).map_err(|e| match e {
                Error::UnnormalizedSupport { total } => Error::InvalidArgument(format!(
                    "support of prompt {p} covers only {total} of π's mass"
                )),
                other => other,
            });
        }
    }
    Ok((value.value(), grad.into_vec()))
}

/// Exact objective, surrogate and both gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactEvaluation {
    /// `J(π)`.
    pub objective: f64,
    /// `∇J(π)`.
    pub objective_grad: Vec<f64>,
    /// Expected surrogate of the configured method.
    pub surrogate: f64,
    /// Expected estimator gradient of the configured method.
    pub surrogate_grad: Vec<f64>,
}

pub fn exact_objective_and_gradient(
    cfg: &MethodConfig,
    policy: &PolicyParams,
    support: &EnumeratedSupport,
) -> Result<ExactEvaluation> {
    cfg.validate()?;
    let (objective, objective_grad) = exact_objective_inner(policy, support, true)?;
    Ok(ExactEvaluation {
        objective,
        objective_grad,
        surrogate: expected_surrogate(cfg, policy, support)?,
        surrogate_grad: expected_gradient(cfg, policy, support)?,
    })
}

/// Central finite differences of `f` at `params` with step `h`.
pub fn finite_difference_gradient<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} ± {h}: {up}, {down}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Monte Carlo mean of an estimator against the exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub n_samples: usize,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub surrogate_grad: Vec<f64>,
    pub true_grad: Vec<f64>,
    /// `(mean − surrogate_grad) / se` per component; zero where both the
    /// standard error and the difference vanish.
    pub z_consistency: Vec<f64>,
    /// `(mean − true_grad) / se` per component.
    pub z_bias: Vec<f64>,
    /// Zero-variance components whose mean differs from the reference.
    pub zero_variance_mismatch_consistency: usize,
    pub zero_variance_mismatch_bias: usize,
    /// Every component had zero sample variance, so the z-scores carry no
    /// information.
    pub degenerate: bool,
}

impl BiasReport {
    pub fn max_abs_z_consistency(&self) -> f64 {
        self.z_consistency.iter().fold(0.0, |m, z| m.max(z.abs()))
    }

    pub fn max_abs_z_bias(&self) -> f64 {
        self.z_bias.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Draws `n_samples` trajectories from the support weights and compares the
/// mean single-trajectory estimate with the exact expected estimator gradient
/// and with `∇J(π)`.
pub fn estimator_bias_report(
    cfg: &MethodConfig,
    policy: &PolicyParams,
    support: &EnumeratedSupport,
    n_samples: usize,
    seed: u64,
) -> Result<BiasReport> {
    if n_samples < 1000 {
        return Err(Error::Insufficient {
            what: "samples",
            needed: 1000,
            available: n_samples,
        });
    }
    if cfg.kind == MethodKind::Dpo {
        return Err(Error::InvalidArgument(
            "bias reports are defined for single-trajectory estimators".into(),
        ));
    }
    let exact = exact_objective_and_gradient(cfg, policy, support)?;
    let n_params = policy.num_params();

    // per-entry estimates with duplicate indices merged
    let mut per_entry = Vec::with_capacity(support.len());
    let mut scratch = vec![0.0; n_params];
    for e in support.entries() {
        let est = estimate_sparse(cfg, policy, Sample::Single(&e.to_trajectory()))?;
        let mut touched: Vec<usize> = Vec::new();
        for &(i, g) in &est.grad.entries {
            if scratch[i] == 0.0 && !touched.contains(&i) {
                touched.push(i);
            }
            scratch[i] += g;
        }
        let merged: Vec<(usize, f64)> = touched.iter().map(|&i| (i, std::mem::take(&mut scratch[i]))).collect();
        per_entry.push(merged);
    }

    let mut cdf = Vec::with_capacity(support.len());
    let mut acc = 0.0;
    for e in support.entries() {
        acc += e.weight;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; support.len()];
    for _ in 0..n_samples {
        let u: f64 = rng.gen::<f64>() * acc;
        let k = cdf.partition_point(|&c| c <= u).min(support.len() - 1);
        counts[k] += 1;
    }

    let mut sum = VectorAccumulator::zeros(n_params);
    let mut sum_sq = VectorAccumulator::zeros(n_params);
    for (grad, &count) in per_entry.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        for &(i, g) in grad {
            sum.add_at(i, count as f64 * g);
            sum_sq.add_at(i, count as f64 * g * g);
        }
    }
    let n = n_samples as f64;
    let mean: Vec<f64> = sum.into_vec().into_iter().map(|s| s / n).collect();
    let std_error: Vec<f64> = sum_sq
        .into_vec()
        .into_iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = ((sq - n * m * m) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();

    let z = |reference: &[f64]| -> (Vec<f64>, usize) {
        let mut mismatches = 0;
        let zs = mean
            .iter()
            .zip(&std_error)
            .zip(reference)
            .map(|((m, se), r)| {
                let diff = m - r;
                if *se > 0.0 {
                    diff / se
                } else {
                    if diff.abs() > 1e-9 * r.abs().max(1.0) {
                        mismatches += 1;
                    }
                    0.0
                }
            })
            .collect();
        (zs, mismatches)
    };
    let (z_consistency, zero_variance_mismatch_consistency) = z(&exact.surrogate_grad);
    let (z_bias, zero_variance_mismatch_bias) = z(&exact.objective_grad);
    let degenerate = std_error.iter().all(|&se| se == 0.0);
    Ok(BiasReport {
        n_samples,
        mean,
        std_error,
        surrogate_grad: exact.surrogate_grad,
        true_grad: exact.objective_grad,
        z_consistency,
        z_bias,
        zero_variance_mismatch_consistency,
        zero_variance_mismatch_bias,
        degenerate,
    })
}
