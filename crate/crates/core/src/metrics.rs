//! Evaluation metrics: pass@1, majority-vote accuracy with bootstrap
//! standard errors, invalid rate and correct-answer cardinality.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, format_sig9};
use crate::policy::{PolicyParams, TokenId};
use crate::task::TaskSuite;

pub const DEFAULT_BOOTSTRAP_TRIALS: usize = 100;

/// Parsed answer of one sampled response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSample {
    /// `None` for invalid responses; they do not vote.
    pub answer: Option<Vec<TokenId>>,
    pub correct: bool,
}

/// Majority answer among the valid samples; ties go to the smallest answer
/// in lexicographic token order. Returns whether it is correct.
pub fn majority_correct<'a, I>(samples: I) -> bool
where
    I: IntoIterator<Item = &'a AnswerSample>,
{
    let mut votes: BTreeMap<&[TokenId], (usize, bool)> = BTreeMap::new();
    for s in samples {
        if let Some(a) = &s.answer {
            let e = votes.entry(a.as_slice()).or_insert((0, s.correct));
            e.0 += 1;
        }
    }
    // BTreeMap iterates in ascending key order, so the first maximum wins ties
    let mut best: Option<(usize, bool)> = None;
    for (count, correct) in votes.into_values() {
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, correct));
        }
    }
    best.is_some_and(|(_, correct)| correct)
}

/// `√(K·V / (N − K))`.
pub fn standard_error(k: usize, n: usize, variance: f64) -> Result<f64> {
    if k >= n {
        return Err(Error::InvalidArgument(format!("K = {k} must be below N = {n}")));
    }
    Ok((k as f64 * variance / (n - k) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean: f64,
    /// Unbiased sample variance of the trial accuracies.
    pub variance: f64,
    pub se: f64,
    pub n_trials: usize,
}

/// Majority-vote accuracy over `k` answers drawn without replacement per
/// prompt, repeated `n_trials` times.
pub fn bootstrap_se<R: Rng + ?Sized>(
    per_prompt: &[Vec<AnswerSample>],
    k: usize,
    n_trials: usize,
    rng: &mut R,
) -> Result<BootstrapResult> {
    let trials = bootstrap_trials(per_prompt, k, n_trials, rng)?;
    bootstrap_from_trials(&trials, k, per_prompt[0].len())
}

/// The per-trial accuracies behind [`bootstrap_se`].
pub fn bootstrap_trials<R: Rng + ?Sized>(
    per_prompt: &[Vec<AnswerSample>],
    k: usize,
    n_trials: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if per_prompt.is_empty() {
        return Err(Error::Insufficient {
            what: "prompts",
            needed: 1,
            available: 0,
        });
    }
    let n = per_prompt[0].len();
    if per_prompt.iter().any(|s| s.len() != n) {
        return Err(Error::InvalidArgument("every prompt needs the same number of samples".into()));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("K must be in 1..{n}, got {k}")));
    }
    if n_trials < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bootstrap trials, got {n_trials}")));
    }
    Ok((0..n_trials)
        .map(|_| {
            let hits = per_prompt
                .iter()
                .filter(|samples| {
                    let picked = index::sample(rng, n, k);
                    majority_correct(picked.iter().map(|i| &samples[i]))
                })
                .count();
            hits as f64 / per_prompt.len() as f64
        })
        .collect())
}

/// Mean, unbiased variance and `√(K V̂ / (N − K))` of trial accuracies.
pub fn bootstrap_from_trials(trials: &[f64], k: usize, n: usize) -> Result<BootstrapResult> {
    if trials.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bootstrap trials, got {}",
            trials.len()
        )));
    }
    let n_trials = trials.len();
    let mean = compensated_sum(trials.iter().copied()) / n_trials as f64;
    let variance = compensated_sum(trials.iter().map(|a| (a - mean) * (a - mean))) / (n_trials - 1) as f64;
    Ok(BootstrapResult {
        mean,
        variance,
        se: standard_error(k, n, variance)?,
        n_trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorityResult {
    pub k: usize,
    pub mean: f64,
    pub se: f64,
}

/// Number of prompts whose correct-sample count falls in `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardinalityBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

/// Bins `0`, `1–4`, `5–8`, … up to `n`.
pub fn cardinality_bins(n: usize) -> Vec<CardinalityBin> {
    let mut bins = vec![CardinalityBin { lo: 0, hi: 0, count: 0 }];
    let mut lo = 1;
    while lo <= n {
        let hi = (lo + 3).min(n);
        bins.push(CardinalityBin { lo, hi, count: 0 });
        lo = hi + 1;
    }
    bins
}

pub fn cardinality_histogram(correct_counts: &[usize], n: usize) -> Result<Vec<CardinalityBin>> {
    let mut bins = cardinality_bins(n);
    for &c in correct_counts {
        let bin = bins
            .iter_mut()
            .find(|b| b.lo <= c && c <= b.hi)
            .ok_or_else(|| Error::InvalidArgument(format!("count {c} exceeds {n} samples")))?;
        bin.count += 1;
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_prompts: usize,
    pub n_samples_per_prompt: usize,
    pub pass_at_1: f64,
    pub majority: Vec<MajorityResult>,
    pub invalid_rate: f64,
    pub cardinality: Vec<CardinalityBin>,
}

impl EvalReport {
    pub fn majority_at(&self, k: usize) -> Option<&MajorityResult> {
        self.majority.iter().find(|m| m.k == k)
    }

    /// Long-format metric table: `metric,k,value,se`.
    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::parse("eval csv", e.to_string());
        out.write_record(["metric", "k", "value", "se"]).map_err(err)?;
        out.write_record(["pass@1", "1", &format_sig9(self.pass_at_1), ""]).map_err(err)?;
        out.write_record(["invalid_rate", "", &format_sig9(self.invalid_rate), ""]).map_err(err)?;
        for m in &self.majority {
            out.write_record([
                "maj@k".to_string(),
                m.k.to_string(),
                format_sig9(m.mean),
                format_sig9(m.se),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| Error::parse("eval csv", e.to_string()))
    }

    /// `bin_lo,bin_hi,count`.
    pub fn write_cardinality_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::parse("cardinality csv", e.to_string());
        out.write_record(["bin_lo", "bin_hi", "count"]).map_err(err)?;
        for b in &self.cardinality {
            out.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])
                .map_err(err)?;
        }
        out.flush().map_err(|e| Error::parse("cardinality csv", e.to_string()))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let path = dir.join(format!("{stem}_metrics.csv"));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.write_metrics_csv(std::io::BufWriter::new(f))?;
        let path = dir.join(format!("{stem}_cardinality.csv"));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.write_cardinality_csv(std::io::BufWriter::new(f))
    }
}

/// Samples responses for every prompt and parses their answers.
pub fn sample_answers<R: Rng + ?Sized>(
    policy: &PolicyParams,
    suite: &TaskSuite,
    n_samples_per_prompt: usize,
    rng: &mut R,
) -> Result<Vec<Vec<AnswerSample>>> {
    let seed: u64 = rng.gen();
    (0..suite.n_prompts())
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            (0..n_samples_per_prompt)
                .map(|_| {
                    let t = policy.sample_trajectory(p, suite.max_len(), &mut rng)?;
                    let s = suite.score(p, &t.tokens)?;
                    Ok(AnswerSample {
                        answer: suite.parse_answer(&t.tokens).map(<[TokenId]>::to_vec),
                        correct: s.correct,
                    })
                })
                .collect()
        })
        .collect()
}

/// Evaluation report from `n_samples_per_prompt` samples per prompt.
///
/// `maj@K` for `K < N` is the bootstrap mean with its standard error; for
/// `K = N` it is the majority over all samples with zero standard error.
pub fn evaluate<R: Rng + ?Sized>(
    policy: &PolicyParams,
    suite: &TaskSuite,
    n_samples_per_prompt: usize,
    ks: &[usize],
    rng: &mut R,
) -> Result<EvalReport> {
    if n_samples_per_prompt == 0 {
        return Err(Error::InvalidArgument("n_samples_per_prompt must be at least 1".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n_samples_per_prompt) {
        return Err(Error::InvalidArgument(format!(
            "K = {k} is outside 1..={n_samples_per_prompt}"
        )));
    }
    let answers = sample_answers(policy, suite, n_samples_per_prompt, rng)?;
    report_from_answers(&answers, ks, rng)
}

/// [`evaluate`] on already sampled answers.
pub fn report_from_answers<R: Rng + ?Sized>(answers: &[Vec<AnswerSample>], ks: &[usize], rng: &mut R) -> Result<EvalReport> {
    let n_prompts = answers.len();
    let n = answers.first().map_or(0, Vec::len);
    if n_prompts == 0 || n == 0 || answers.iter().any(|a| a.len() != n) {
        return Err(Error::InvalidArgument("answers must be a non-empty rectangular table".into()));
    }
    let total = (n_prompts * n) as f64;
    let correct_counts: Vec<usize> = answers.iter().map(|a| a.iter().filter(|s| s.correct).count()).collect();
    let pass_at_1 = correct_counts.iter().sum::<usize>() as f64 / total;
    let invalid = answers.iter().flatten().filter(|s| s.answer.is_none()).count();
    let mut majority = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == n {
            let hits = answers.iter().filter(|a| majority_correct(a.iter())).count();
            majority.push(MajorityResult {
                k,
                mean: hits as f64 / n_prompts as f64,
                se: 0.0,
            });
        } else {
            let b = bootstrap_se(answers, k, DEFAULT_BOOTSTRAP_TRIALS, rng)?;
            // a single vote is just that sample's correctness, so the exact
            // expectation over draws is pass@1
            let mean = if k == 1 { pass_at_1 } else { b.mean };
            majority.push(MajorityResult { k, mean, se: b.se });
        }
    }
    Ok(EvalReport {
        n_prompts,
        n_samples_per_prompt: n,
        pass_at_1,
        majority,
        invalid_rate: invalid as f64 / total,
        cardinality: cardinality_histogram(&correct_counts, n)?,
    })
}
