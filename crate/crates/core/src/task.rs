//! Synthetic verifiable-answer tasks.
//!
//! Each prompt has a target answer over a digit alphabet. A response is
//! *valid* when it contains the answer marker followed by at least one token
//! before eos, and *correct* when the tokens after the first marker are exactly
//! the target. Rewards are `+1` for correct and `-1` otherwise, invalid
//! responses included.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    LinearBlock, PolicyKind, PolicyParams, PolicyShape, PromptId, TokenId, Vocabulary,
};

/// Difficulty knobs of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Size of the answer alphabet (tokens `0..n_digits`).
    pub n_digits: usize,
    pub answer_len: usize,
    /// Extra non-answer tokens that only make responses longer or invalid.
    pub n_distractors: usize,
    /// Longest response, eos included.
    pub max_len: usize,
    /// Require every prompt to have a different target.
    pub distinct_targets: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_digits: 4,
            answer_len: 1,
            n_distractors: 1,
            max_len: 4,
            distinct_targets: false,
        }
    }
}

impl TaskConfig {
    pub fn vocab_size(&self) -> usize {
        self.n_digits + self.n_distractors + 2
    }

    pub fn marker(&self) -> TokenId {
        (self.n_digits + self.n_distractors) as TokenId
    }

    pub fn eos(&self) -> TokenId {
        (self.n_digits + self.n_distractors + 1) as TokenId
    }

    /// Number of distinct targets, saturating at `u128::MAX`.
    pub fn answer_space(&self) -> u128 {
        (self.n_digits as u128)
            .checked_pow(self.answer_len as u32)
            .unwrap_or(u128::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_digits == 0 {
            return Err(Error::Config("n_digits must be at least 1".into()));
        }
        if self.answer_len == 0 {
            return Err(Error::Config("answer_len must be at least 1".into()));
        }
        if self.answer_len + 1 > self.max_len {
            return Err(Error::Config(format!(
                "marker plus a {}-token answer does not fit in max_len {}",
                self.answer_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab_size(), self.marker(), self.eos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub reward: f64,
    pub valid: bool,
    pub correct: bool,
}

/// Exact outcome probabilities of a policy on one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OutcomeProbs {
    pub correct: f64,
    pub valid_incorrect: f64,
    pub invalid: f64,
}

impl OutcomeProbs {
    pub fn expected_reward(&self) -> f64 {
        self.correct - self.valid_incorrect - self.invalid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    config: TaskConfig,
    vocab: Vocabulary,
    targets: Vec<Vec<TokenId>>,
}

impl TaskSuite {
    pub fn from_targets(config: TaskConfig, targets: Vec<Vec<TokenId>>) -> Result<Self> {
        config.validate()?;
        if targets.is_empty() {
            return Err(Error::InvalidArgument("suite needs at least one prompt".into()));
        }
        for (i, t) in targets.iter().enumerate() {
            if t.len() != config.answer_len || t.iter().any(|&d| d as usize >= config.n_digits) {
                return Err(Error::InvalidArgument(format!(
                    "target of prompt {i} is not a {}-digit answer over {} digits",
                    config.answer_len, config.n_digits
                )));
            }
        }
        let vocab = config.vocabulary()?;
        Ok(Self {
            config,
            vocab,
            targets,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn n_prompts(&self) -> usize {
        self.targets.len()
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn marker(&self) -> TokenId {
        self.config.marker()
    }

    pub fn eos(&self) -> TokenId {
        self.config.eos()
    }

    pub fn target(&self, prompt: PromptId) -> Result<&[TokenId]> {
        self.targets
            .get(prompt)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownPrompt(prompt))
    }

    pub fn targets(&self) -> &[Vec<TokenId>] {
        &self.targets
    }

    /// Policy shape matching this suite.
    pub fn policy_shape(&self, kind: PolicyKind) -> Result<PolicyShape> {
        PolicyShape::new(kind, self.vocab.clone(), self.n_prompts(), self.max_len())
    }

    /// The answer a response commits to: the tokens between the first marker
    /// and eos. `None` when the response is invalid: no marker, no eos after
    /// it, or an answer that is empty or contains non-digit tokens.
    pub fn parse_answer<'a>(&self, tokens: &'a [TokenId]) -> Option<&'a [TokenId]> {
        let marker = self.marker();
        let eos = self.eos();
        let start = tokens.iter().position(|&t| t == marker)? + 1;
        let rest = &tokens[start..];
        let end = rest.iter().position(|&t| t == eos)?;
        let answer = &rest[..end];
        if answer.is_empty() || answer.iter().any(|&t| t as usize >= self.config.n_digits) {
            None
        } else {
            Some(answer)
        }
    }

    pub fn score(&self, prompt: PromptId, tokens: &[TokenId]) -> Result<ScoreResult> {
        let target = self.target(prompt)?;
        let answer = self.parse_answer(tokens);
        let valid = answer.is_some();
        let correct = answer == Some(target);
        Ok(ScoreResult {
            reward: if correct { 1.0 } else { -1.0 },
            valid,
            correct,
        })
    }

    /// Exact correct / valid-but-wrong / invalid probabilities of `policy` on
    /// `prompt`, walking only the marker-free prefixes of the sequence tree.
    pub fn outcome_probs(&self, policy: &PolicyParams, prompt: PromptId) -> Result<OutcomeProbs> {
        let target = self.target(prompt)?;
        if policy.vocab() != &self.vocab || policy.n_prompts() != self.n_prompts() {
            return Err(Error::InvalidArgument(
                "policy shape does not match the suite".into(),
            ));
        }
        let mut out = OutcomeProbs::default();
        let mut prefix = Vec::with_capacity(self.max_len());
        let max_len = self.max_len().min(policy.max_len());
        self.walk(policy, prompt, target, max_len, &mut prefix, 1.0, &mut out)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn walk(
        &self,
        policy: &PolicyParams,
        prompt: PromptId,
        target: &[TokenId],
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        mass: f64,
        out: &mut OutcomeProbs,
    ) -> Result<()> {
        let marker = self.marker();
        let eos = self.eos();
        let probs = policy.next_token_probs(prompt, prefix)?;
        for (j, &q) in probs.iter().enumerate() {
            let token = j as TokenId;
            let m = mass * q;
            if m == 0.0 {
                continue;
            }
            if token == eos {
                out.invalid += m;
            } else if token == marker {
                prefix.push(marker);
                if prefix.len() == max_len {
                    out.invalid += m;
                } else {
                    self.walk_answer(policy, prompt, target, max_len, prefix, 0, true, m, out)?;
                }
                prefix.pop();
            } else {
                prefix.push(token);
                if prefix.len() == max_len {
                    out.invalid += m;
                } else {
                    self.walk(policy, prompt, target, max_len, prefix, m, out)?;
                }
                prefix.pop();
            }
        }
        Ok(())
    }

    /// Walks the continuations after the marker. `written` answer tokens
    /// follow the marker; `on_target` says whether they match the target so
    /// far.
    #[allow(clippy::too_many_arguments)]
    fn walk_answer(
        &self,
        policy: &PolicyParams,
        prompt: PromptId,
        target: &[TokenId],
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        written: usize,
        on_target: bool,
        mass: f64,
        out: &mut OutcomeProbs,
    ) -> Result<()> {
        let probs = policy.next_token_probs(prompt, prefix)?;
        let n_digits = self.config.n_digits;
        let finish = |out: &mut OutcomeProbs, m: f64, len: usize, on: bool| {
            if len == 0 {
                out.invalid += m;
            } else if on && len == target.len() {
                out.correct += m;
            } else {
                out.valid_incorrect += m;
            }
        };
        for (j, &q) in probs.iter().enumerate() {
            let m = mass * q;
            if m == 0.0 {
                continue;
            }
            let token = j as TokenId;
            if token == self.eos() {
                finish(out, m, written, on_target);
            } else if j < n_digits {
                let on = on_target && written < target.len() && target[written] == token;
                prefix.push(token);
                if prefix.len() == max_len {
                    // truncated before eos
                    out.invalid += m;
                } else {
                    self.walk_answer(policy, prompt, target, max_len, prefix, written + 1, on, m, out)?;
                }
                prefix.pop();
            } else {
                out.invalid += m;
            }
        }
        Ok(())
    }

    /// Mean exact outcome probabilities over all prompts.
    pub fn mean_outcomes(&self, policy: &PolicyParams) -> Result<OutcomeProbs> {
        let mut total = OutcomeProbs::default();
        for p in 0..self.n_prompts() {
            let o = self.outcome_probs(policy, p)?;
            total.correct += o.correct;
            total.valid_incorrect += o.valid_incorrect;
            total.invalid += o.invalid;
        }
        let n = self.n_prompts() as f64;
        Ok(OutcomeProbs {
            correct: total.correct / n,
            valid_incorrect: total.valid_incorrect / n,
            invalid: total.invalid / n,
        })
    }

    /// Exact expected reward of `policy`, averaged uniformly over prompts.
    pub fn expected_reward(&self, policy: &PolicyParams) -> Result<f64> {
        Ok(self.mean_outcomes(policy)?.expected_reward())
    }

    /// Writes one prompt per line (`id<TAB>target tokens`) after a header
    /// line carrying the difficulty knobs.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let c = &self.config;
        writeln!(
            w,
            "# n_digits={} answer_len={} n_distractors={} max_len={} distinct_targets={}",
            c.n_digits, c.answer_len, c.n_distractors, c.max_len, c.distinct_targets
        )?;
        for (i, t) in self.targets.iter().enumerate() {
            let tokens: Vec<String> = t.iter().map(|d| d.to_string()).collect();
            writeln!(w, "{i}\t{}", tokens.join(" "))?;
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
        let mut lines = r.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("line 1", "empty suite file"))?;
        let header = header.map_err(|e| Error::parse("line 1", e.to_string()))?;
        let config = parse_header(&header)?;
        let mut targets = Vec::new();
        for (n, line) in lines {
            let loc = format!("line {}", n + 1);
            let line = line.map_err(|e| Error::parse(&loc, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, toks) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&loc, "expected `id<TAB>tokens`"))?;
            let id: usize = id.parse().map_err(|_| Error::parse(&loc, "bad prompt id"))?;
            if id != targets.len() {
                return Err(Error::parse(&loc, format!("prompt ids must be dense, expected {}", targets.len())));
            }
            let tokens = toks
                .split_whitespace()
                .map(|t| t.parse::<TokenId>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(&loc, "bad token"))?;
            targets.push(tokens);
        }
        Self::from_targets(config, targets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn parse_header(line: &str) -> Result<TaskConfig> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::parse("line 1", "missing `#` header"))?;
    let mut config = TaskConfig::default();
    for field in body.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::parse("line 1", format!("bad header field `{field}`")))?;
        let bad = || Error::parse("line 1", format!("bad value for `{k}`"));
        match k {
            "n_digits" => config.n_digits = v.parse().map_err(|_| bad())?,
            "answer_len" => config.answer_len = v.parse().map_err(|_| bad())?,
            "n_distractors" => config.n_distractors = v.parse().map_err(|_| bad())?,
            "max_len" => config.max_len = v.parse().map_err(|_| bad())?,
            "distinct_targets" => config.distinct_targets = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::parse("line 1", format!("unknown header field `{k}`"))),
        }
    }
    Ok(config)
}

/// Builds a suite with targets drawn uniformly over the answer space.
pub fn build_suite(seed: u64, n_prompts: usize, config: &TaskConfig) -> Result<TaskSuite> {
    config.validate()?;
    if n_prompts == 0 {
        return Err(Error::InvalidArgument("n_prompts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = config.answer_space();
    let digits = |mut code: u128| -> Vec<TokenId> {
        let mut out = vec![0; config.answer_len];
        for slot in out.iter_mut().rev() {
            *slot = (code % config.n_digits as u128) as TokenId;
            code /= config.n_digits as u128;
        }
        out
    };
    let targets = if config.distinct_targets {
        if space < n_prompts as u128 {
            return Err(Error::InvalidArgument(format!(
                "answer space of size {space} cannot hold {n_prompts} distinct targets"
            )));
        }
        let space = usize::try_from(space).map_err(|_| {
            Error::InvalidArgument("answer space too large for distinct sampling".into())
        })?;
        index::sample(&mut rng, space, n_prompts)
            .into_iter()
            .map(|c| digits(c as u128))
            .collect()
    } else {
        (0..n_prompts)
            .map(|_| {
                (0..config.answer_len)
                    .map(|_| rng.gen_range(0..config.n_digits) as TokenId)
                    .collect()
            })
            .collect()
    };
    TaskSuite::from_targets(config.clone(), targets)
}

/// Knobs of the synthetic "pretrained" starting policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasePolicyConfig {
    /// Extra logit on the marker in every marker-free context.
    pub marker_logit: f64,
    /// Extra logit on eos before the marker.
    pub early_eos_logit: f64,
    /// Extra logit on digits while an answer is being written.
    pub answer_logit: f64,
    /// Per-prompt skill on the target digit, drawn uniformly from this range.
    pub skill_low: f64,
    pub skill_high: f64,
    /// Extra logit on eos once a full-length answer has been written.
    pub stop_logit: f64,
    /// Uniform logit noise amplitude.
    pub noise: f64,
}

impl Default for BasePolicyConfig {
    fn default() -> Self {
        Self {
            marker_logit: 5.0,
            early_eos_logit: 4.2,
            answer_logit: 3.0,
            skill_low: 0.0,
            skill_high: 2.0,
            stop_logit: 5.0,
            noise: 0.1,
        }
    }
}

/// Builds a starting policy with a task-shaped prior and heterogeneous
/// per-prompt skill.
pub fn base_policy(
    suite: &TaskSuite,
    kind: PolicyKind,
    config: &BasePolicyConfig,
    seed: u64,
) -> Result<PolicyParams> {
    if config.skill_low > config.skill_high {
        return Err(Error::Config("skill_low must not exceed skill_high".into()));
    }
    let shape = suite.policy_shape(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = if config.noise > 0.0 {
        PolicyParams::random(shape, config.noise, &mut rng)
    } else {
        PolicyParams::uniform(shape)
    };
    let skills: Vec<f64> = (0..suite.n_prompts())
        .map(|_| {
            if config.skill_high > config.skill_low {
                rng.gen_range(config.skill_low..config.skill_high)
            } else {
                config.skill_low
            }
        })
        .collect();
    match kind {
        PolicyKind::Tabular => {
            for (p, &skill) in skills.iter().enumerate() {
                let mut prefix = Vec::new();
                shape_tabular(suite, config, skill, p, &mut policy, &mut prefix)?;
            }
        }
        PolicyKind::FeatureLinear => shape_linear(suite, config, &skills, &mut policy)?,
    }
    Ok(policy)
}

fn shape_tabular(
    suite: &TaskSuite,
    config: &BasePolicyConfig,
    skill: f64,
    prompt: PromptId,
    policy: &mut PolicyParams,
    prefix: &mut Vec<TokenId>,
) -> Result<()> {
    let marker = suite.marker();
    let eos = suite.eos() as usize;
    let n_digits = suite.config().n_digits;
    let answer_len = suite.config().answer_len;
    let target = suite.target(prompt)?.to_vec();
    let mut logits = policy.logits(prompt, prefix)?;
    match prefix.iter().position(|&t| t == marker) {
        None => {
            logits[marker as usize] += config.marker_logit;
            logits[eos] += config.early_eos_logit;
        }
        Some(at) => {
            let written = &prefix[at + 1..];
            if written.len() < answer_len {
                for l in logits.iter_mut().take(n_digits) {
                    *l += config.answer_logit;
                }
                if written == &target[..written.len()] {
                    logits[target[written.len()] as usize] += skill;
                }
            } else {
                logits[eos] += config.stop_logit;
            }
        }
    }
    policy.set_tabular_logits(prompt, prefix, &logits)?;
    if prefix.len() + 1 < suite.max_len() {
        for t in 0..suite.vocab().size() as TokenId {
            if suite.vocab().is_eos(t) {
                continue;
            }
            prefix.push(t);
            shape_tabular(suite, config, skill, prompt, policy, prefix)?;
            prefix.pop();
        }
    }
    Ok(())
}

fn shape_linear(
    suite: &TaskSuite,
    config: &BasePolicyConfig,
    skills: &[f64],
    policy: &mut PolicyParams,
) -> Result<()> {
    let marker = suite.marker();
    let eos = suite.eos() as usize;
    let n_digits = suite.config().n_digits;
    let answer_len = suite.config().answer_len;
    for (p, &skill) in skills.iter().enumerate() {
        let block = policy.linear_block_mut(LinearBlock::Prompt(p))?;
        for &d in suite.target(p)? {
            block[d as usize] += skill / answer_len as f64;
        }
    }
    let start = policy.linear_block_mut(LinearBlock::Previous(None))?;
    start[marker as usize] += config.marker_logit;
    start[eos] += config.early_eos_logit;
    let after_marker = policy.linear_block_mut(LinearBlock::Previous(Some(marker)))?;
    for l in after_marker.iter_mut().take(n_digits) {
        *l += config.answer_logit;
    }
    if answer_len + 1 < suite.max_len() {
        policy.linear_block_mut(LinearBlock::Position(answer_len + 1))?[eos] += config.stop_logit;
    }
    Ok(())
}

/// Human-readable rendering of a token sequence, for logs and error messages.
pub fn render_tokens(suite: &TaskSuite, tokens: &[TokenId]) -> String {
    let mut s = String::new();
    for (i, &t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        if t == suite.marker() {
            s.push_str("<ans>");
        } else if t == suite.eos() {
            s.push_str("<eos>");
        } else if (t as usize) < suite.config().n_digits {
            let _ = write!(s, "{t}");
        } else {
            let _ = write!(s, "x{t}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> TaskSuite {
        let config = TaskConfig {
            n_digits: 3,
            answer_len: 1,
            n_distractors: 1,
            max_len: 4,
            distinct_targets: false,
        };
        TaskSuite::from_targets(config, vec![vec![2], vec![0]]).unwrap()
    }

    #[test]
    fn score_examples() {
        let s = suite();
        let (m, e) = (s.marker(), s.eos());
        assert_eq!(
            s.score(0, &[m, 2, e]).unwrap(),
            ScoreResult { reward: 1.0, valid: true, correct: true }
        );
        assert_eq!(
            s.score(0, &[e]).unwrap(),
            ScoreResult { reward: -1.0, valid: false, correct: false }
        );
        assert_eq!(
            s.score(0, &[m, 1, e]).unwrap(),
            ScoreResult { reward: -1.0, valid: true, correct: false }
        );
        assert!(matches!(s.score(7, &[e]), Err(Error::UnknownPrompt(7))));
    }

    #[test]
    fn answer_parsing_edge_cases() {
        let s = suite();
        let (m, e) = (s.marker(), s.eos());
        // marker directly followed by eos, or marker as the final token
        assert!(!s.score(0, &[m, e]).unwrap().valid);
        assert!(!s.score(0, &[0, 3, m]).unwrap().valid);
        // truncated at max_len before eos
        assert!(!s.score(0, &[3, 3, m, 2]).unwrap().valid);
        // distractor inside the answer
        assert!(!s.score(0, &[m, 2, 3, e]).unwrap().valid);
        // extra tokens after the answer make it wrong
        assert!(!s.score(0, &[m, 2, 2, e]).unwrap().correct);
    }

    #[test]
    fn build_suite_is_deterministic_and_dense() {
        let config = TaskConfig {
            n_digits: 10,
            answer_len: 2,
            max_len: 4,
            ..TaskConfig::default()
        };
        let a = build_suite(7, 10, &config).unwrap();
        let b = build_suite(7, 10, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_prompts(), 10);
        assert_eq!(config.answer_space(), 100);
        assert!(a.targets().iter().all(|t| t.len() == 2 && t.iter().all(|&d| d < 10)));
    }

    #[test]
    fn distinct_targets_need_room() {
        let config = TaskConfig {
            n_digits: 2,
            answer_len: 1,
            distinct_targets: true,
            ..TaskConfig::default()
        };
        assert!(build_suite(1, 3, &config).is_err());
        let s = build_suite(1, 2, &config).unwrap();
        assert_ne!(s.targets()[0], s.targets()[1]);
    }

    #[test]
    fn suite_file_round_trip() {
        let config = TaskConfig {
            n_digits: 5,
            answer_len: 2,
            ..TaskConfig::default()
        };
        let s = build_suite(3, 6, &config).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = TaskSuite::read_from(buf.as_slice()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn outcome_probs_partition_and_match_enumeration() {
        let s = suite();
        let policy = base_policy(&s, PolicyKind::Tabular, &BasePolicyConfig::default(), 4).unwrap();
        for p in 0..s.n_prompts() {
            let o = s.outcome_probs(&policy, p).unwrap();
            assert!((o.correct + o.valid_incorrect + o.invalid - 1.0).abs() < 1e-12);
            let mut brute = OutcomeProbs::default();
            for (tokens, prob) in policy.enumerate_support(p, s.max_len()).unwrap() {
                let r = s.score(p, &tokens).unwrap();
                match (r.correct, r.valid) {
                    (true, _) => brute.correct += prob,
                    (false, true) => brute.valid_incorrect += prob,
                    (false, false) => brute.invalid += prob,
                }
            }
            assert!((o.correct - brute.correct).abs() < 1e-12);
            assert!((o.valid_incorrect - brute.valid_incorrect).abs() < 1e-12);
            assert!((o.invalid - brute.invalid).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_base_policy_is_well_formed() {
        let s = suite();
        let policy = base_policy(&s, PolicyKind::FeatureLinear, &BasePolicyConfig::default(), 4).unwrap();
        let o = s.mean_outcomes(&policy).unwrap();
        assert!((o.correct + o.valid_incorrect + o.invalid - 1.0).abs() < 1e-12);
        assert!(o.correct > 0.0);
    }
}
