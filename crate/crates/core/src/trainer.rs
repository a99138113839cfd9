//! Minibatch gradient ascent on a fixed dataset and the multi-iteration
//! loop where each iteration's reference policy is the previous result.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{compose, generate_dataset, CompositionSpec, Dataset};
use crate::error::{Error, Result};
use crate::numeric::{format_sig9, l2_norm, VectorAccumulator};
use crate::objectives::{estimate_sparse, Diagnostics, MethodConfig, MethodKind, Sample};
use crate::policy::{PolicyParams, Trajectory};
use crate::task::TaskSuite;

/// Batches at least this large compute per-trajectory gradients in parallel.
const PARALLEL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Global L2 clip threshold; `inf` disables clipping.
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            grad_clip_norm: 1.0,
            batch_size: 16,
            epochs: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Batch mean of the surrogate.
    pub surrogate: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub mean_ratio: f64,
    pub clip_frac_lo: f64,
    pub clip_frac_hi: f64,
    /// Exact expected reward of the updated policy, when probed.
    pub probe_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const HEADER: [&'static str; 8] = [
        "step",
        "surrogate",
        "grad_norm_pre",
        "grad_norm_post",
        "mean_ratio",
        "clip_frac_lo",
        "clip_frac_hi",
        "probe_reward",
    ];

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Last probed reward, if any.
    pub fn last_probe(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.probe_reward)
    }

    pub fn csv_fields(r: &TrainRecord) -> [String; 8] {
        [
            r.step.to_string(),
            format_sig9(r.surrogate),
            format_sig9(r.grad_norm_pre),
            format_sig9(r.grad_norm_post),
            format_sig9(r.mean_ratio),
            format_sig9(r.clip_frac_lo),
            format_sig9(r.clip_frac_hi),
            r.probe_reward.map(format_sig9).unwrap_or_default(),
        ]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::parse("train log csv", e.to_string());
        out.write_record(Self::HEADER).map_err(csv_err)?;
        for r in &self.records {
            out.write_record(Self::csv_fields(r)).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::parse("train log csv", e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Norms of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateNorms {
    pub pre_clip: f64,
    pub post_clip: f64,
}

/// `params += lr · g`, where `g` is `grad` rescaled to norm `clip_norm` when
/// it is longer.
pub fn apply_update_in_place(params: &mut [f64], grad: &[f64], lr: f64, clip_norm: f64) -> Result<UpdateNorms> {
    if params.len() != grad.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient component {i} is {}", grad[i])));
    }
    let pre_clip = l2_norm(grad);
    let scale = if pre_clip > clip_norm { clip_norm / pre_clip } else { 1.0 };
    for (p, g) in params.iter_mut().zip(grad) {
        *p += lr * scale * g;
    }
    Ok(UpdateNorms {
        pre_clip,
        post_clip: pre_clip * scale,
    })
}

pub fn apply_update(params: &[f64], grad: &[f64], lr: f64, clip_norm: f64) -> Result<Vec<f64>> {
    let mut out = params.to_vec();
    apply_update_in_place(&mut out, grad, lr, clip_norm)?;
    Ok(out)
}

/// Exact expected-reward probe evaluated every `every` steps and after the
/// last step.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub suite: &'a TaskSuite,
    pub every: usize,
}

/// Groups a dataset into (positive, negative) pairs within each prompt.
/// Both sides are shuffled and zipped, so each trajectory is used at most once.
pub fn make_pairs<R: Rng + ?Sized>(trajectories: &[Trajectory], rng: &mut R) -> Vec<(usize, usize)> {
    let mut by_prompt: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, t) in trajectories.iter().enumerate() {
        let e = by_prompt.entry(t.prompt_id).or_default();
        if t.is_positive() {
            e.0.push(i);
        } else {
            e.1.push(i);
        }
    }
    let mut pairs = Vec::new();
    for (mut pos, mut neg) in by_prompt.into_values() {
        pos.shuffle(rng);
        neg.shuffle(rng);
        pairs.extend(pos.into_iter().zip(neg));
    }
    pairs
}

/// One training iteration on a fixed dataset.
pub fn train_iteration<R: Rng + ?Sized>(
    policy: &PolicyParams,
    dataset: &Dataset,
    cfg: &MethodConfig,
    opt: &OptimizerConfig,
    rng: &mut R,
) -> Result<(PolicyParams, TrainLog)> {
    train_iteration_probed(policy, dataset, cfg, opt, None, rng)
}

/// [`train_iteration`] with an optional expected-reward probe.
pub fn train_iteration_probed<R: Rng + ?Sized>(
    policy: &PolicyParams,
    dataset: &Dataset,
    cfg: &MethodConfig,
    opt: &OptimizerConfig,
    probe: Option<Probe<'_>>,
    rng: &mut R,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    opt.validate()?;
    let mut current = policy.clone();
    let mut log = TrainLog::default();
    let trajs = dataset.trajectories();
    if trajs.is_empty() {
        return Ok((current, log));
    }
    let pairs = if cfg.kind == MethodKind::Dpo {
        make_pairs(trajs, rng)
    } else {
        Vec::new()
    };
    let n_items = if cfg.kind == MethodKind::Dpo { pairs.len() } else { trajs.len() };
    let total_steps = opt.epochs * n_items.div_ceil(opt.batch_size);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut step = 0;
    for _ in 0..opt.epochs {
        order.shuffle(rng);
        for batch in order.chunks(opt.batch_size) {
            let sample = |&i: &usize| {
                let s = if cfg.kind == MethodKind::Dpo {
                    let (w, l) = pairs[i];
                    Sample::Pair {
                        winner: &trajs[w],
                        loser: &trajs[l],
                    }
                } else {
                    Sample::Single(&trajs[i])
                };
                estimate_sparse(cfg, &current, s)
            };
            let estimates = if batch.len() >= PARALLEL_BATCH {
                batch.par_iter().map(sample).collect::<Result<Vec<_>>>()?
            } else {
                batch.iter().map(sample).collect::<Result<Vec<_>>>()?
            };
            let mut acc = VectorAccumulator::zeros(current.num_params());
            let scale = 1.0 / batch.len() as f64;
            for e in &estimates {
                e.grad.accumulate(&mut acc, scale);
            }
            let grad = acc.into_vec();
            let diag = Diagnostics::combine(estimates.iter().map(|e| &e.diagnostics));
            let norms = apply_update_in_place(current.values_mut(), &grad, opt.learning_rate, opt.grad_clip_norm)?;
            if !current.is_finite() {
                return Err(Error::DegeneratePolicy(format!(
                    "non-finite parameters after step {step} (grad norm {:.6e}, mean ratio {:.6e}, surrogate {:.6e})",
                    norms.pre_clip, diag.mean_ratio, diag.surrogate
                )));
            }
            step += 1;
            let probe_reward = match probe {
                Some(p) if (p.every > 0 && step % p.every == 0) || step == total_steps => {
                    Some(p.suite.expected_reward(&current)?)
                }
                _ => None,
            };
            log.records.push(TrainRecord {
                step,
                surrogate: diag.surrogate * scale,
                grad_norm_pre: norms.pre_clip,
                grad_norm_post: norms.post_clip,
                mean_ratio: diag.mean_ratio,
                clip_frac_lo: diag.clip_frac_low,
                clip_frac_hi: diag.clip_frac_high,
                probe_reward,
            });
        }
    }
    current.set_version(policy.version().next());
    Ok((current, log))
}

/// Multi-iteration schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationSchedule {
    pub n_iterations: usize,
    /// One spec per iteration, or a single spec reused for all of them.
    /// `n_per_prompt` is the number of candidates generated per prompt.
    pub compositions: Vec<CompositionSpec>,
    /// Probe cadence in optimizer steps; 0 probes only at the end of each
    /// iteration.
    #[serde(default)]
    pub probe_every: usize,
}

impl IterationSchedule {
    pub fn new(n_iterations: usize, composition: CompositionSpec) -> Self {
        Self {
            n_iterations,
            compositions: vec![composition],
            probe_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Config("n_iterations must be at least 1".into()));
        }
        if self.compositions.len() != 1 && self.compositions.len() != self.n_iterations {
            return Err(Error::Config(format!(
                "expected 1 or {} composition specs, found {}",
                self.n_iterations,
                self.compositions.len()
            )));
        }
        self.compositions.iter().try_for_each(CompositionSpec::validate)
    }

    pub fn composition(&self, iteration: usize) -> &CompositionSpec {
        if self.compositions.len() == 1 {
            &self.compositions[0]
        } else {
            &self.compositions[iteration]
        }
    }
}

/// Runs `n_iterations` of generate, compose and train, with `μ_i = π_{i−1}`.
/// Returns `π_1, …, π_n` and one log per iteration.
pub fn train_rounds<R: Rng + ?Sized>(
    policy0: &PolicyParams,
    suite: &TaskSuite,
    schedule: &IterationSchedule,
    cfg: &MethodConfig,
    opt: &OptimizerConfig,
    rng: &mut R,
) -> Result<(Vec<PolicyParams>, Vec<TrainLog>)> {
    schedule.validate()?;
    cfg.validate()?;
    opt.validate()?;
    let mut policies = Vec::with_capacity(schedule.n_iterations);
    let mut logs = Vec::with_capacity(schedule.n_iterations);
    let mut current = policy0.clone();
    for i in 0..schedule.n_iterations {
        let spec = schedule.composition(i);
        let candidates = generate_dataset(&current, suite, spec.n_per_prompt, rng)?;
        let data = compose(&candidates, spec, rng)?;
        let probe = Probe {
            suite,
            every: schedule.probe_every,
        };
        let (next, log) = train_iteration_probed(&current, &data, cfg, opt, Some(probe), rng)?;
        policies.push(next.clone());
        logs.push(log);
        current = next;
    }
    Ok((policies, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CompositionStrategy;
    use crate::objectives::per_trajectory_gradient;
    use crate::policy::{PolicyKind, PolicyShape, PolicyVersion, Vocabulary};
    use crate::task::{base_policy, build_suite, BasePolicyConfig, TaskConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_examples() {
        assert_eq!(apply_update(&[1.0, 2.0], &[0.0, 0.0], 1.0, 1.0).unwrap(), vec![1.0, 2.0]);
        let out = apply_update(&[0.0, 0.0], &[3.0, 4.0], 1.0, 1.0).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        let out = apply_update(&[0.0, 0.0], &[0.3, 0.4], 1.0, 1.0).unwrap();
        assert_eq!(out, vec![0.3, 0.4]);
        let mut p = vec![0.0; 3];
        let norms = apply_update_in_place(&mut p, &[6.0, 8.0, 0.0], 0.1, 1.0).unwrap();
        assert_eq!(norms.pre_clip, 10.0);
        assert!((l2_norm(&p) - 0.1).abs() < 1e-9);
        assert!(apply_update(&[0.0], &[f64::NAN], 1.0, 1.0).is_err());
    }

    #[test]
    fn empty_dataset_is_a_no_op() {
        let shape = PolicyShape::new(PolicyKind::Tabular, Vocabulary::plain(2).unwrap(), 1, 1).unwrap();
        let policy = PolicyParams::uniform(shape);
        let d = Dataset::new(Vec::new(), CompositionStrategy::Uniform, PolicyVersion(0));
        let (out, log) = train_iteration(
            &policy,
            &d,
            &MethodConfig::new(MethodKind::Topr),
            &OptimizerConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.values(), policy.values());
        assert!(log.is_empty());
    }

    #[test]
    fn single_step_matches_hand_update() {
        let shape = PolicyShape::new(PolicyKind::Tabular, Vocabulary::plain(3).unwrap(), 1, 2).unwrap();
        let policy = PolicyParams::random(shape, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let t = Trajectory::new(0, vec![2, 1], -1.3, -1.0, true, false).unwrap();
        let cfg = MethodConfig::new(MethodKind::Topr);
        let opt = OptimizerConfig {
            learning_rate: 0.3,
            grad_clip_norm: f64::INFINITY,
            batch_size: 1,
            epochs: 1,
        };
        let d = Dataset::new(vec![t.clone()], CompositionStrategy::Uniform, PolicyVersion(0));
        let (out, log) = train_iteration(&policy, &d, &cfg, &opt, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let g = per_trajectory_gradient(&cfg, &policy, &t).unwrap().grad;
        for ((new, old), g) in out.values().iter().zip(policy.values()).zip(&g) {
            assert!((new - (old + 0.3 * g)).abs() < 1e-15);
        }
        assert_eq!(log.len(), 1);
        assert_eq!(out.version(), PolicyVersion(1));
    }

    #[test]
    fn rounds_are_deterministic() {
        let suite = build_suite(1, 6, &TaskConfig::default()).unwrap();
        let p0 = base_policy(&suite, PolicyKind::Tabular, &BasePolicyConfig::default(), 2).unwrap();
        let schedule = IterationSchedule::new(2, CompositionSpec::uniform(40, 8));
        let cfg = MethodConfig::new(MethodKind::Topr);
        let opt = OptimizerConfig::default();
        let run = || train_rounds(&p0, &suite, &schedule, &cfg, &opt, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a.len(), 2);
        assert!(la[0].last_probe().is_some());
    }

    #[test]
    fn dpo_trains_on_pairs() {
        let suite = build_suite(1, 6, &TaskConfig::default()).unwrap();
        let p0 = base_policy(&suite, PolicyKind::Tabular, &BasePolicyConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = generate_dataset(&p0, &suite, 16, &mut rng).unwrap();
        let (out, log) = train_iteration(&p0, &d, &MethodConfig::new(MethodKind::Dpo), &OptimizerConfig::default(), &mut rng).unwrap();
        assert!(!log.is_empty());
        assert_ne!(out.values(), p0.values());
    }

    #[test]
    fn csv_has_header_and_one_row_per_step() {
        let log = TrainLog {
            records: vec![TrainRecord {
                step: 1,
                surrogate: 0.5,
                grad_norm_pre: 2.0,
                grad_norm_post: 1.0,
                mean_ratio: 1.0,
                clip_frac_lo: 0.0,
                clip_frac_hi: 0.25,
                probe_reward: None,
            }],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,surrogate,grad_norm_pre,grad_norm_post,mean_ratio,clip_frac_lo,clip_frac_hi,probe_reward");
        assert_eq!(lines[1], "1,0.500000000,2.00000000,1.00000000,1.00000000,0,0.250000000,");
    }
}
