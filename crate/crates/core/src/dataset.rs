//! Training datasets: generation from a reference policy, composition, and
//! the baseline / effective-proportion algebra.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, PolicyVersion, TokenId, Trajectory};
use crate::task::TaskSuite;

/// How a dataset was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionStrategy {
    /// Raw output of [`generate_dataset`].
    Generated,
    Uniform,
    PositivesOnly,
    AnnaKarenina,
}

impl CompositionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            CompositionStrategy::Generated => "generated",
            CompositionStrategy::Uniform => "uniform",
            CompositionStrategy::PositivesOnly => "positives-only",
            CompositionStrategy::AnnaKarenina => "anna-karenina",
        }
    }
}

impl fmt::Display for CompositionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompositionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            CompositionStrategy::Generated,
            CompositionStrategy::Uniform,
            CompositionStrategy::PositivesOnly,
            CompositionStrategy::AnnaKarenina,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown composition strategy `{s}`")))
    }
}

/// A list of scored trajectories from one reference policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    p_actual: f64,
    strategy: CompositionStrategy,
    source: PolicyVersion,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, strategy: CompositionStrategy, source: PolicyVersion) -> Self {
        let p_actual = positive_fraction(&trajectories);
        Self {
            trajectories,
            p_actual,
            strategy,
            source,
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    /// Realized fraction of positive trajectories (0 for an empty dataset).
    pub fn p_actual(&self) -> f64 {
        self.p_actual
    }

    pub fn strategy(&self) -> CompositionStrategy {
        self.strategy
    }

    pub fn source(&self) -> PolicyVersion {
        self.source
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.trajectories.iter().filter(|t| t.is_positive()).count()
    }

    /// Writes one tab-separated record per trajectory after a header line.
    /// Reals are written with 17 significant digits so they read back
    /// bit-exactly.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# strategy={} source={}", self.strategy, self.source.0)?;
        writeln!(w, "prompt_id\ttokens\tlog_mu\treward\tvalid\tcorrect")?;
        for t in &self.trajectories {
            let tokens: Vec<String> = t.tokens.iter().map(|x| x.to_string()).collect();
            writeln!(
                w,
                "{}\t{}\t{:.16e}\t{:.16e}\t{}\t{}",
                t.prompt_id,
                tokens.join(" "),
                t.log_mu,
                t.reward,
                u8::from(t.valid),
                u8::from(t.correct)
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut strategy = CompositionStrategy::Generated;
        let mut source = PolicyVersion(0);
        let mut trajectories = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))?;
            let at = || format!("line {}", i + 1);
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("strategy", v)) => strategy = v.parse()?,
                        Some(("source", v)) => {
                            source = PolicyVersion(v.parse().map_err(|_| Error::parse(at(), "bad source version"))?)
                        }
                        _ => return Err(Error::parse(at(), format!("unexpected header field `{kv}`"))),
                    }
                }
                continue;
            }
            if line.starts_with("prompt_id") || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::parse(at(), format!("expected 6 fields, found {}", fields.len())));
            }
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::parse(at(), format!("bad {what} `{s}`")))
            };
            let flag = |s: &str, what: &str| -> Result<bool> {
                match s {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    _ => Err(Error::parse(at(), format!("bad {what} flag `{s}`"))),
                }
            };
            let tokens = fields[1]
                .split_whitespace()
                .map(|t| t.parse::<TokenId>().map_err(|_| Error::parse(at(), format!("bad token `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            let traj = Trajectory::new(
                fields[0].parse().map_err(|_| Error::parse(at(), "bad prompt id"))?,
                tokens,
                num(fields[2], "log_mu")?,
                num(fields[3], "reward")?,
                flag(fields[4], "valid")?,
                flag(fields[5], "correct")?,
            )
            .map_err(|e| Error::parse(at(), e.to_string()))?;
            trajectories.push(traj);
        }
        Ok(Self::new(trajectories, strategy, source))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn positive_fraction(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories.iter().filter(|t| t.is_positive()).count() as f64 / trajectories.len() as f64
}

/// Target shape of a composed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSpec {
    pub strategy: CompositionStrategy,
    pub target_size: usize,
    /// Exact positive fraction for the uniform strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_target: Option<f64>,
    /// Candidates generated per prompt before composition.
    pub n_per_prompt: usize,
}

impl CompositionSpec {
    pub fn uniform(target_size: usize, n_per_prompt: usize) -> Self {
        Self {
            strategy: CompositionStrategy::Uniform,
            target_size,
            p_target: None,
            n_per_prompt,
        }
    }

    pub fn with_strategy(mut self, strategy: CompositionStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_p_target(mut self, p: f64) -> Self {
        self.p_target = Some(p);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be at least 1".into()));
        }
        if self.n_per_prompt == 0 {
            return Err(Error::Config("n_per_prompt must be at least 1".into()));
        }
        if let Some(p) = self.p_target {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("p_target must be in (0, 1], got {p}")));
            }
            match self.strategy {
                CompositionStrategy::Uniform => {}
                CompositionStrategy::PositivesOnly if p == 1.0 => {}
                s => {
                    return Err(Error::Config(format!("p_target is not supported by the {s} strategy")))
                }
            }
        }
        if self.strategy == CompositionStrategy::Generated {
            return Err(Error::Config("`generated` is not a composition strategy".into()));
        }
        Ok(())
    }
}

/// Samples `n_per_prompt` scored trajectories per prompt from `mu`.
///
/// Each prompt draws from its own ChaCha stream keyed by one seed taken from
/// `rng`, so the result does not depend on the number of worker threads.
pub fn generate_dataset<R: Rng + ?Sized>(
    mu: &PolicyParams,
    suite: &TaskSuite,
    n_per_prompt: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if n_per_prompt == 0 {
        return Err(Error::InvalidArgument("n_per_prompt must be at least 1".into()));
    }
    if mu.n_prompts() != suite.n_prompts() {
        return Err(Error::InvalidArgument(format!(
            "policy covers {} prompts, suite has {}",
            mu.n_prompts(),
            suite.n_prompts()
        )));
    }
    let seed: u64 = rng.gen();
    let per_prompt = (0..suite.n_prompts())
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            (0..n_per_prompt)
                .map(|_| {
                    let mut t = mu.sample_trajectory(p, suite.max_len(), &mut rng)?;
                    let s = suite.score(p, &t.tokens)?;
                    t.reward = s.reward;
                    t.valid = s.valid;
                    t.correct = s.correct;
                    Ok(t)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(
        per_prompt.into_iter().flatten().collect(),
        CompositionStrategy::Generated,
        mu.version(),
    ))
}

fn draw<R: Rng + ?Sized>(pool: &[usize], n: usize, what: &'static str, rng: &mut R) -> Result<Vec<usize>> {
    if pool.len() < n {
        return Err(Error::Insufficient {
            what,
            needed: n,
            available: pool.len(),
        });
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// Builds a training set of `spec.target_size` trajectories.
///
/// Selected trajectories keep their order from the input dataset.
pub fn compose<R: Rng + ?Sized>(dataset: &Dataset, spec: &CompositionSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.target_size;
    let trajs = dataset.trajectories();
    let positives: Vec<usize> = (0..trajs.len()).filter(|&i| trajs[i].is_positive()).collect();
    let negatives: Vec<usize> = (0..trajs.len()).filter(|&i| !trajs[i].is_positive()).collect();
    let mut chosen = match spec.strategy {
        CompositionStrategy::Uniform => match spec.p_target {
            None => {
                let all: Vec<usize> = (0..trajs.len()).collect();
                draw(&all, n, "trajectories", rng)?
            }
            Some(p) => {
                let n_pos = (p * n as f64).floor() as usize;
                let mut out = draw(&positives, n_pos, "positive trajectories", rng)?;
                out.extend(draw(&negatives, n - n_pos, "negative trajectories", rng)?);
                out
            }
        },
        CompositionStrategy::PositivesOnly => draw(&positives, n, "positive trajectories", rng)?,
        CompositionStrategy::AnnaKarenina => {
            let mut first: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in &positives {
                first.entry(trajs[i].prompt_id).or_insert(i);
            }
            let kept: Vec<usize> = first.into_values().collect();
            let mut out = if kept.len() > n {
                draw(&kept, n, "positive trajectories", rng)?
            } else {
                kept
            };
            let fill = n - out.len();
            out.extend(draw(&negatives, fill, "negative trajectories", rng)?);
            out
        }
        CompositionStrategy::Generated => unreachable!("rejected by validate"),
    };
    chosen.sort_unstable();
    Ok(Dataset::new(
        chosen.into_iter().map(|i| trajs[i].clone()).collect(),
        spec.strategy,
        dataset.source(),
    ))
}

/// `p̃ = p(1 − c) / (1 + (1 − 2p)c)`: the positive fraction of a reweighted
/// dataset whose baseline-free gradient is proportional to the gradient with
/// baseline `c` on binary ±1 rewards.
pub fn effective_proportion(p: f64, c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p must be in [0, 1], got {p}")));
    }
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("baseline must be in [-1, 1], got {c}")));
    }
    if c == -1.0 && p > 0.0 {
        return Ok(1.0);
    }
    let denom = 1.0 + (1.0 - 2.0 * p) * c;
    if !(denom > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "effective proportion undefined for p = {p}, c = {c}"
        )));
    }
    Ok(p * (1.0 - c) / denom)
}

/// Baseline `c` with `effective_proportion(p, c) = target`.
pub fn baseline_for_target(p: f64, target: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p must be in (0, 1), got {p}")));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("target must be in [0, 1], got {target}")));
    }
    Ok((p - target) / (p + target * (1.0 - 2.0 * p)))
}

/// Normalizing factor `p(1 − c) + (1 − p)(1 + c)` between the gradient with
/// baseline `c` and the baseline-free gradient on the reweighted dataset.
pub fn reweighting_scale(p: f64, c: f64) -> f64 {
    p * (1.0 - c) + (1.0 - p) * (1.0 + c)
}

/// [`effective_proportion`] of a dataset; rewards must be ±1.
pub fn dataset_effective_proportion(dataset: &Dataset, c: f64) -> Result<f64> {
    if let Some(t) = dataset.trajectories().iter().find(|t| t.reward != 1.0 && t.reward != -1.0) {
        return Err(Error::InvalidArgument(format!(
            "effective proportion needs binary ±1 rewards, found {}",
            t.reward
        )));
    }
    effective_proportion(dataset.p_actual(), c)
}

/// Share of the baseline-weighted training signal falling in each
/// prompt-accuracy bucket. Correct trajectories weigh `1 − c`, incorrect
/// ones `1 + c`; prompts are bucketed by their empirical accuracy into
/// `n_buckets` equal-width bins over `[0, 1]`.
pub fn difficulty_profile(dataset: &Dataset, c: f64, n_buckets: usize) -> Result<Vec<f64>> {
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("baseline must be in [-1, 1], got {c}")));
    }
    if n_buckets == 0 {
        return Err(Error::InvalidArgument("n_buckets must be at least 1".into()));
    }
    let mut per_prompt: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for t in dataset.trajectories() {
        let e = per_prompt.entry(t.prompt_id).or_default();
        e.0 += usize::from(t.correct);
        e.1 += 1;
    }
    let mut weights = vec![0.0; n_buckets];
    for (correct, total) in per_prompt.into_values() {
        let acc = correct as f64 / total as f64;
        let bucket = ((acc * n_buckets as f64).floor() as usize).min(n_buckets - 1);
        weights[bucket] += (1.0 - c) * correct as f64 + (1.0 + c) * (total - correct) as f64;
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Insufficient {
            what: "trajectories with nonzero weight",
            needed: 1,
            available: 0,
        });
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;
    use crate::task::{base_policy, build_suite, BasePolicyConfig, TaskConfig};

    fn traj(prompt: usize, reward: f64) -> Trajectory {
        Trajectory::new(prompt, vec![0], -0.5, reward, reward > 0.0, reward > 0.0).unwrap()
    }

    fn fixture() -> (TaskSuite, PolicyParams) {
        let suite = build_suite(3, 10, &TaskConfig::default()).unwrap();
        let mu = base_policy(&suite, PolicyKind::Tabular, &BasePolicyConfig::default(), 4).unwrap();
        (suite, mu)
    }

    #[test]
    fn generation_shape_and_determinism() {
        let (suite, mu) = fixture();
        let a = generate_dataset(&mu, &suite, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = generate_dataset(&mu, &suite, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 160);
        assert_eq!(a, b);
        for t in a.trajectories() {
            assert!((t.log_mu - mu.log_prob(t.prompt_id, &t.tokens).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_correct_policy_gives_all_positive() {
        let (suite, _) = fixture();
        let cfg = BasePolicyConfig {
            marker_logit: 60.0,
            early_eos_logit: -60.0,
            answer_logit: 0.0,
            skill_low: 60.0,
            skill_high: 60.0,
            stop_logit: 60.0,
            noise: 0.0,
        };
        let mu = base_policy(&suite, PolicyKind::Tabular, &cfg, 0).unwrap();
        let d = generate_dataset(&mu, &suite, 16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(d.trajectories().iter().filter(|t| t.prompt_id == 0).all(|t| t.reward == 1.0));
    }

    #[test]
    fn positives_only_removes_negatives() {
        let d = Dataset::new(
            (0..20).map(|i| traj(i % 4, if i % 3 == 0 { 1.0 } else { -1.0 })).collect(),
            CompositionStrategy::Generated,
            PolicyVersion(0),
        );
        let spec = CompositionSpec::uniform(5, 5).with_strategy(CompositionStrategy::PositivesOnly);
        let out = compose(&d, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.p_actual(), 1.0);
        let spec = CompositionSpec::uniform(8, 5).with_strategy(CompositionStrategy::PositivesOnly);
        let err = compose(&d, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Insufficient { needed: 8, available: 7, .. }), "{err}");
    }

    #[test]
    fn anna_karenina_keeps_first_positive() {
        let mut trajs: Vec<Trajectory> = (0..16).map(|_| traj(0, -1.0)).collect();
        for i in [5, 9, 12] {
            trajs[i] = traj(0, 1.0);
            trajs[i].tokens = vec![i as TokenId];
        }
        trajs.extend((0..16).map(|_| traj(1, -1.0)));
        let d = Dataset::new(trajs, CompositionStrategy::Generated, PolicyVersion(0));
        let spec = CompositionSpec::uniform(10, 16).with_strategy(CompositionStrategy::AnnaKarenina);
        let out = compose(&d, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let pos: Vec<_> = out.trajectories().iter().filter(|t| t.is_positive()).collect();
        assert_eq!(pos.len(), 1);
        assert_eq!(pos[0].tokens, vec![5]);
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn stratified_uniform_hits_target_exactly() {
        let d = Dataset::new(
            (0..4000).map(|i| traj(i % 7, if i % 2 == 0 { 1.0 } else { -1.0 })).collect(),
            CompositionStrategy::Generated,
            PolicyVersion(0),
        );
        let spec = CompositionSpec::uniform(1000, 1).with_p_target(0.1);
        let out = compose(&d, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out.len(), 1000);
        assert_eq!(out.p_actual(), 0.1);
    }

    #[test]
    fn effective_proportion_examples() {
        assert_eq!(effective_proportion(0.5, 0.0).unwrap(), 0.5);
        assert_eq!(effective_proportion(0.3, -1.0).unwrap(), 1.0);
        assert!((effective_proportion(0.1, -0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!(effective_proportion(0.0, -1.0).is_err());
        assert!(effective_proportion(1.0, 1.0).is_err());
        let c = baseline_for_target(0.1, 0.25).unwrap();
        assert!((c + 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_binary_rewards_rejected() {
        let d = Dataset::new(vec![traj(0, 0.5)], CompositionStrategy::Generated, PolicyVersion(0));
        assert!(dataset_effective_proportion(&d, 0.0).is_err());
    }

    #[test]
    fn difficulty_profile_examples() {
        let mut trajs = Vec::new();
        for i in 0..10 {
            trajs.push(traj(0, if i < 9 { 1.0 } else { -1.0 }));
            trajs.push(traj(1, if i < 1 { 1.0 } else { -1.0 }));
        }
        let d = Dataset::new(trajs, CompositionStrategy::Generated, PolicyVersion(0));
        let w = difficulty_profile(&d, 0.5, 2).unwrap();
        assert!((w[0] - 0.7).abs() < 1e-12 && (w[1] - 0.3).abs() < 1e-12);
        let w = difficulty_profile(&d, -1.0, 2).unwrap();
        assert!((w[0] - 0.1).abs() < 1e-12);
        let w = difficulty_profile(&d, 0.0, 2).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!(difficulty_profile(&d, 1.5, 2).is_err());
    }

    #[test]
    fn persistence_round_trips_bit_exactly() {
        let (suite, mu) = fixture();
        let d = generate_dataset(&mu, &suite, 8, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..]).unwrap();
        assert_eq!(back, d);
        for (a, b) in d.trajectories().iter().zip(back.trajectories()) {
            assert_eq!(a.log_mu.to_bits(), b.log_mu.to_bits());
        }
    }
}
