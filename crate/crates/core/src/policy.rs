//! Autoregressive categorical policies over a small vocabulary.
//!
//! A policy assigns each context (prompt plus emitted prefix) a vector of
//! logits and samples the next token from their softmax. Two parameter
//! families are supported:
//!
//! * **tabular**: one free logit vector per `(prompt, full prefix)` context;
//! * **feature-linear**: logits are the sum of three learned blocks indexed by
//!   the prompt, the position and the previous token (one-hot features).
//!
//! Both have closed-form gradients of `log π(τ)`, which is what the estimator
//! engine and the oracles build on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, VectorAccumulator};

pub type TokenId = u32;
pub type PromptId = usize;

/// Maximum number of terminal sequences `enumerate_support` will visit.
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Upper bound on the dense parameter count of a tabular policy.
pub const TABULAR_PARAM_CAP: usize = 50_000_000;

/// Token space with optional answer-marker and end-of-sequence tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    marker: Option<TokenId>,
    eos: Option<TokenId>,
}

impl Vocabulary {
    /// Task vocabulary with both special tokens.
    pub fn new(size: usize, marker: TokenId, eos: TokenId) -> Result<Self> {
        if size < 3 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary with special tokens needs at least 3 tokens, got {size}"
            )));
        }
        if marker == eos {
            return Err(Error::InvalidArgument(
                "answer marker and eos must be distinct tokens".into(),
            ));
        }
        for t in [marker, eos] {
            if t as usize >= size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: size,
                });
            }
        }
        Ok(Self {
            size,
            marker: Some(marker),
            eos: Some(eos),
        })
    }

    /// Vocabulary without special tokens; sequences always run to `max_len`.
    /// Used for the small analytic fixtures.
    pub fn plain(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        Ok(Self {
            size,
            marker: None,
            eos: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn marker(&self) -> Option<TokenId> {
        self.marker
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    pub fn is_eos(&self, token: TokenId) -> bool {
        self.eos == Some(token)
    }

    /// Number of tokens that can appear inside a prefix (everything but eos).
    pub fn continuing_count(&self) -> usize {
        self.size - usize::from(self.eos.is_some())
    }

    /// Dense rank of a non-eos token among the continuing tokens.
    fn continuing_rank(&self, token: TokenId) -> usize {
        match self.eos {
            Some(e) if token > e => token as usize - 1,
            _ => token as usize,
        }
    }

    fn check(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.size,
            })
        }
    }
}

/// A complete sampled response together with its cached reference
/// log-probability and its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: PromptId,
    pub tokens: Vec<TokenId>,
    /// Natural-log probability under the policy that generated it.
    pub log_mu: f64,
    pub reward: f64,
    pub valid: bool,
    pub correct: bool,
}

impl Trajectory {
    pub fn new(
        prompt_id: PromptId,
        tokens: Vec<TokenId>,
        log_mu: f64,
        reward: f64,
        valid: bool,
        correct: bool,
    ) -> Result<Self> {
        let traj = Self {
            prompt_id,
            tokens,
            log_mu,
            reward,
            valid,
            correct,
        };
        traj.validate()?;
        Ok(traj)
    }

    /// Unscored trajectory carrying only its reference log-probability.
    pub fn unscored(prompt_id: PromptId, tokens: Vec<TokenId>, log_mu: f64) -> Self {
        Self {
            prompt_id,
            tokens,
            log_mu,
            reward: 0.0,
            valid: false,
            correct: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidArgument("trajectory has no tokens".into()));
        }
        if self.log_mu.is_nan() || self.log_mu > 0.0 {
            return Err(Error::InvalidArgument(format!(
                "log_mu must be a log-probability (<= 0), got {}",
                self.log_mu
            )));
        }
        if !self.reward.is_finite() {
            return Err(Error::NonFinite(format!("reward {}", self.reward)));
        }
        if self.correct && !self.valid {
            return Err(Error::InvalidArgument(
                "trajectory marked correct but invalid".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positive examples are those with strictly positive reward.
    pub fn is_positive(&self) -> bool {
        self.reward > 0.0
    }
}

/// Monotone tag identifying which policy generated a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct PolicyVersion(pub u64);

impl PolicyVersion {
    pub fn next(self) -> Self {
        PolicyVersion(self.0 + 1)
    }
}

#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub trajectories: Vec<Trajectory>,
    pub source: PolicyVersion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Tabular,
    FeatureLinear,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(PolicyKind::Tabular),
            "feature-linear" | "linear" => Ok(PolicyKind::FeatureLinear),
            other => Err(Error::InvalidArgument(format!("unknown policy kind `{other}`"))),
        }
    }
}

/// Shape descriptor mapping contexts to parameter blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub kind: PolicyKind,
    pub vocab: Vocabulary,
    pub n_prompts: usize,
    pub max_len: usize,
}

impl PolicyShape {
    pub fn new(kind: PolicyKind, vocab: Vocabulary, n_prompts: usize, max_len: usize) -> Result<Self> {
        if n_prompts == 0 {
            return Err(Error::InvalidArgument("policy needs at least one prompt".into()));
        }
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        let shape = Self {
            kind,
            vocab,
            n_prompts,
            max_len,
        };
        shape.checked_num_params()?;
        Ok(shape)
    }

    fn contexts_per_prompt(&self) -> Option<usize> {
        let k = self.vocab.continuing_count();
        let mut total: usize = 0;
        let mut level: usize = 1;
        for _ in 0..self.max_len {
            total = total.checked_add(level)?;
            level = level.checked_mul(k)?;
        }
        Some(total)
    }

    /// Offset of the first prefix of length `len` within a prompt's table.
    fn prefix_offset(&self, len: usize) -> usize {
        let k = self.vocab.continuing_count();
        if k == 1 {
            len
        } else {
            (k.pow(len as u32) - 1) / (k - 1)
        }
    }

    fn checked_num_params(&self) -> Result<usize> {
        let v = self.vocab.size();
        match self.kind {
            PolicyKind::Tabular => {
                let n = self
                    .contexts_per_prompt()
                    .and_then(|c| c.checked_mul(self.n_prompts))
                    .and_then(|c| c.checked_mul(v))
                    .filter(|&n| n <= TABULAR_PARAM_CAP);
                n.ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "tabular policy with V={v}, max_len={} and {} prompts exceeds {TABULAR_PARAM_CAP} parameters",
                        self.max_len, self.n_prompts
                    ))
                })
            }
            PolicyKind::FeatureLinear => Ok((self.n_prompts + self.max_len + v + 1) * v),
        }
    }

    pub fn num_params(&self) -> usize {
        self.checked_num_params()
            .expect("shape validated at construction")
    }
}

/// Parameter blocks whose sum gives the logits of one context.
#[derive(Debug, Clone, Copy)]
struct Blocks {
    starts: [usize; 3],
    count: usize,
}

impl Blocks {
    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.starts[..self.count].iter().copied()
    }
}

/// Walks the contexts of one trajectory.
struct Cursor<'a> {
    shape: &'a PolicyShape,
    prompt: PromptId,
    position: usize,
    code: usize,
    prev: Option<TokenId>,
}

impl<'a> Cursor<'a> {
    fn new(shape: &'a PolicyShape, prompt: PromptId) -> Self {
        Self {
            shape,
            prompt,
            position: 0,
            code: 0,
            prev: None,
        }
    }

    fn blocks(&self) -> Blocks {
        let v = self.shape.vocab.size();
        match self.shape.kind {
            PolicyKind::Tabular => {
                let cpp = self.shape.contexts_per_prompt().unwrap_or(0);
                let ctx = self.prompt * cpp + self.shape.prefix_offset(self.position) + self.code;
                Blocks {
                    starts: [ctx * v, 0, 0],
                    count: 1,
                }
            }
            PolicyKind::FeatureLinear => {
                let n = self.shape.n_prompts;
                let l = self.shape.max_len;
                let prev = self.prev.map_or(v, |t| t as usize);
                Blocks {
                    starts: [self.prompt * v, (n + self.position) * v, (n + l + prev) * v],
                    count: 3,
                }
            }
        }
    }

    fn advance(&mut self, token: TokenId) {
        let k = self.shape.vocab.continuing_count();
        self.code = self.code * k + self.shape.vocab.continuing_rank(token);
        self.position += 1;
        self.prev = Some(token);
    }
}

/// Sparse gradient as `(parameter index, value)` pairs; indices may repeat.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub entries: Vec<(usize, f64)>,
}

impl SparseGrad {
    pub fn add_into(&self, dense: &mut [f64], scale: f64) {
        for &(i, g) in &self.entries {
            dense[i] += scale * g;
        }
    }

    pub fn accumulate(&self, acc: &mut VectorAccumulator, scale: f64) {
        for &(i, g) in &self.entries {
            acc.add_at(i, scale * g);
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut acc = VectorAccumulator::zeros(len);
        self.accumulate(&mut acc, 1.0);
        acc.into_vec()
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, g)| g * dense[i]).sum()
    }
}

/// Dense parameter vector of a softmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    shape: PolicyShape,
    version: PolicyVersion,
    values: Vec<f64>,
}

impl PolicyParams {
    /// All-zero logits: the uniform policy.
    pub fn uniform(shape: PolicyShape) -> Self {
        let n = shape.num_params();
        Self {
            shape,
            version: PolicyVersion::default(),
            values: vec![0.0; n],
        }
    }

    pub fn from_values(shape: PolicyShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.num_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                shape.num_params(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", values[i])));
        }
        Ok(Self {
            shape,
            version: PolicyVersion::default(),
            values,
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(shape: PolicyShape, scale: f64, rng: &mut R) -> Self {
        let n = shape.num_params();
        let values = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self {
            shape,
            version: PolicyVersion::default(),
            values,
        }
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn kind(&self) -> PolicyKind {
        self.shape.kind
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.shape.vocab
    }

    pub fn max_len(&self) -> usize {
        self.shape.max_len
    }

    pub fn n_prompts(&self) -> usize {
        self.shape.n_prompts
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn version(&self) -> PolicyVersion {
        self.version
    }

    pub fn set_version(&mut self, version: PolicyVersion) {
        self.version = version;
    }

    /// Copy with replaced parameter values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::from_values(self.shape.clone(), values)?;
        p.version = self.version;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_prompt(&self, prompt: PromptId) -> Result<()> {
        if prompt >= self.shape.n_prompts {
            Err(Error::UnknownPrompt(prompt))
        } else {
            Ok(())
        }
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<()> {
        if prefix.len() >= self.shape.max_len {
            return Err(Error::InvalidArgument(format!(
                "prefix of length {} has no continuation under max_len {}",
                prefix.len(),
                self.shape.max_len
            )));
        }
        for &t in prefix {
            self.shape.vocab.check(t)?;
            if self.shape.vocab.is_eos(t) {
                return Err(Error::InvalidArgument("prefix contains eos".into()));
            }
        }
        Ok(())
    }

    fn cursor_at(&self, prompt: PromptId, prefix: &[TokenId]) -> Cursor<'_> {
        let mut cursor = Cursor::new(&self.shape, prompt);
        for &t in prefix {
            cursor.advance(t);
        }
        cursor
    }

    fn logits_into(&self, blocks: Blocks, out: &mut [f64]) {
        let v = self.shape.vocab.size();
        out.iter_mut().for_each(|x| *x = 0.0);
        for start in blocks.iter() {
            for (o, w) in out.iter_mut().zip(&self.values[start..start + v]) {
                *o += w;
            }
        }
    }

    /// Logits of the next-token distribution after `prefix`.
    pub fn logits(&self, prompt: PromptId, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.check_prefix(prefix)?;
        let mut out = vec![0.0; self.shape.vocab.size()];
        self.logits_into(self.cursor_at(prompt, prefix).blocks(), &mut out);
        Ok(out)
    }

    /// Next-token probabilities after `prefix`.
    pub fn next_token_probs(&self, prompt: PromptId, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let logits = self.logits(prompt, prefix)?;
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(Error::DegeneratePolicy(format!(
                "non-finite logits for prompt {prompt}"
            )));
        }
        Ok(logits.iter().map(|z| (z - lse).exp()).collect())
    }

    /// Overwrites the parameter block of a tabular context. Test fixtures use
    /// this to write a distribution directly.
    pub fn set_tabular_logits(&mut self, prompt: PromptId, prefix: &[TokenId], logits: &[f64]) -> Result<()> {
        if self.shape.kind != PolicyKind::Tabular {
            return Err(Error::InvalidArgument(
                "set_tabular_logits requires a tabular policy".into(),
            ));
        }
        self.check_prompt(prompt)?;
        self.check_prefix(prefix)?;
        let v = self.shape.vocab.size();
        if logits.len() != v {
            return Err(Error::InvalidArgument(format!(
                "expected {v} logits, got {}",
                logits.len()
            )));
        }
        let start = self.cursor_at(prompt, prefix).blocks().starts[0];
        self.values[start..start + v].copy_from_slice(logits);
        Ok(())
    }

    /// Mutable access to one feature block of a feature-linear policy:
    /// `Prompt(p)`, `Position(i)` or `Previous(t)` (`None` = start of sequence).
    pub fn linear_block_mut(&mut self, block: LinearBlock) -> Result<&mut [f64]> {
        if self.shape.kind != PolicyKind::FeatureLinear {
            return Err(Error::InvalidArgument(
                "linear_block_mut requires a feature-linear policy".into(),
            ));
        }
        let v = self.shape.vocab.size();
        let n = self.shape.n_prompts;
        let l = self.shape.max_len;
        let index = match block {
            LinearBlock::Prompt(p) => {
                self.check_prompt(p)?;
                p
            }
            LinearBlock::Position(i) if i < l => n + i,
            LinearBlock::Position(i) => {
                return Err(Error::InvalidArgument(format!("position {i} >= max_len {l}")))
            }
            LinearBlock::Previous(None) => n + l + v,
            LinearBlock::Previous(Some(t)) => {
                self.shape.vocab.check(t)?;
                n + l + t as usize
            }
        };
        Ok(&mut self.values[index * v..(index + 1) * v])
    }

    fn check_sequence(&self, prompt: PromptId, tokens: &[TokenId]) -> Result<()> {
        self.check_prompt(prompt)?;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.shape.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of length {} exceeds max_len {}",
                tokens.len(),
                self.shape.max_len
            )));
        }
        for (i, &t) in tokens.iter().enumerate() {
            self.shape.vocab.check(t)?;
            if self.shape.vocab.is_eos(t) && i + 1 != tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "eos at position {i} is followed by more tokens"
                )));
            }
        }
        Ok(())
    }

    /// `log π(tokens | prompt)`.
    pub fn log_prob(&self, prompt: PromptId, tokens: &[TokenId]) -> Result<f64> {
        self.check_sequence(prompt, tokens)?;
        let v = self.shape.vocab.size();
        let mut logits = vec![0.0; v];
        let mut cursor = Cursor::new(&self.shape, prompt);
        let mut total = 0.0;
        for &t in tokens {
            self.logits_into(cursor.blocks(), &mut logits);
            let lse = log_sum_exp(&logits);
            if !lse.is_finite() {
                return Err(Error::DegeneratePolicy(format!(
                    "non-finite logits at position {} for prompt {prompt}",
                    cursor.position
                )));
            }
            total += logits[t as usize] - lse;
            cursor.advance(t);
        }
        Ok(total)
    }

    /// `log π(tokens | prompt)` and its gradient in sparse form.
    pub fn log_prob_sparse(&self, prompt: PromptId, tokens: &[TokenId]) -> Result<(f64, SparseGrad)> {
        self.check_sequence(prompt, tokens)?;
        let v = self.shape.vocab.size();
        let mut logits = vec![0.0; v];
        let mut cursor = Cursor::new(&self.shape, prompt);
        let mut total = 0.0;
        let mut grad = SparseGrad {
            entries: Vec::with_capacity(tokens.len() * v * if self.shape.kind == PolicyKind::Tabular { 1 } else { 3 }),
        };
        for &t in tokens {
            let blocks = cursor.blocks();
            self.logits_into(blocks, &mut logits);
            let lse = log_sum_exp(&logits);
            if !lse.is_finite() {
                return Err(Error::DegeneratePolicy(format!(
                    "non-finite logits at position {} for prompt {prompt}",
                    cursor.position
                )));
            }
            total += logits[t as usize] - lse;
            // d/dz log softmax(z)[t] = onehot(t) - softmax(z)
            for start in blocks.iter() {
                for (j, z) in logits.iter().enumerate() {
                    let p = (z - lse).exp();
                    let g = if j == t as usize { 1.0 - p } else { -p };
                    grad.entries.push((start + j, g));
                }
            }
            cursor.advance(t);
        }
        Ok((total, grad))
    }

    /// `log π(τ)` and its exact dense gradient with respect to all parameters.
    pub fn log_prob_and_grad(&self, traj: &Trajectory) -> Result<(f64, Vec<f64>)> {
        let (lp, grad) = self.log_prob_sparse(traj.prompt_id, &traj.tokens)?;
        Ok((lp, grad.to_dense(self.num_params())))
    }

    /// Draws one trajectory autoregressively. The trajectory is unscored;
    /// `log_mu` holds its exact log-probability under this policy.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        prompt: PromptId,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.check_prompt(prompt)?;
        if max_len == 0 || max_len > self.shape.max_len {
            return Err(Error::InvalidArgument(format!(
                "max_len must be in 1..={}, got {max_len}",
                self.shape.max_len
            )));
        }
        let v = self.shape.vocab.size();
        let mut logits = vec![0.0; v];
        let mut cursor = Cursor::new(&self.shape, prompt);
        let mut tokens = Vec::with_capacity(max_len);
        let mut log_mu = 0.0;
        while tokens.len() < max_len {
            self.logits_into(cursor.blocks(), &mut logits);
            if logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::DegeneratePolicy(format!(
                    "non-finite logits at position {} for prompt {prompt}",
                    tokens.len()
                )));
            }
            let lse = log_sum_exp(&logits);
            let u: f64 = rng.gen();
            let mut cumulative = 0.0;
            let mut chosen = v - 1;
            for (j, z) in logits.iter().enumerate() {
                cumulative += (z - lse).exp();
                if u < cumulative {
                    chosen = j;
                    break;
                }
            }
            // rounding can leave the last bucket with zero mass; fall back to
            // the most recent token that has support
            while chosen > 0 && (logits[chosen] - lse).exp() == 0.0 {
                chosen -= 1;
            }
            let token = chosen as TokenId;
            log_mu += logits[chosen] - lse;
            tokens.push(token);
            if self.shape.vocab.is_eos(token) {
                break;
            }
            cursor.advance(token);
        }
        Ok(Trajectory::unscored(prompt, tokens, log_mu))
    }

    /// Samples `n` trajectories for each listed prompt.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        prompts: &[PromptId],
        n: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<SampledBatch> {
        let mut trajectories = Vec::with_capacity(prompts.len() * n);
        for &p in prompts {
            for _ in 0..n {
                trajectories.push(self.sample_trajectory(p, max_len, rng)?);
            }
        }
        Ok(SampledBatch {
            trajectories,
            source: self.version,
        })
    }

    /// Every terminal sequence for `prompt` with its exact probability.
    ///
    /// Sequences end at eos or at `max_len`; mass truncated at `max_len` is
    /// kept as is, so the probabilities sum to one.
    pub fn enumerate_support(&self, prompt: PromptId, max_len: usize) -> Result<Vec<(Vec<TokenId>, f64)>> {
        self.check_prompt(prompt)?;
        if max_len == 0 || max_len > self.shape.max_len {
            return Err(Error::InvalidArgument(format!(
                "max_len must be in 1..={}, got {max_len}",
                self.shape.max_len
            )));
        }
        let v = self.shape.vocab.size() as u128;
        let requested = v.checked_pow(max_len as u32).unwrap_or(u128::MAX);
        if requested > ENUMERATION_CAP {
            return Err(Error::EnumerationCap {
                requested,
                cap: ENUMERATION_CAP,
            });
        }
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(max_len);
        self.enumerate_from(prompt, max_len, &mut prefix, 0.0, &mut out)?;
        Ok(out)
    }

    fn enumerate_from(
        &self,
        prompt: PromptId,
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        log_p: f64,
        out: &mut Vec<(Vec<TokenId>, f64)>,
    ) -> Result<()> {
        let logits = self.logits(prompt, prefix)?;
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(Error::DegeneratePolicy(format!(
                "non-finite logits for prompt {prompt}"
            )));
        }
        for (j, z) in logits.iter().enumerate() {
            let token = j as TokenId;
            let lp = log_p + z - lse;
            prefix.push(token);
            if self.shape.vocab.is_eos(token) || prefix.len() == max_len {
                out.push((prefix.clone(), lp.exp()));
            } else {
                self.enumerate_from(prompt, max_len, prefix, lp, out)?;
            }
            prefix.pop();
        }
        Ok(())
    }
}

/// Feature block of a feature-linear policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearBlock {
    Prompt(PromptId),
    Position(usize),
    Previous(Option<TokenId>),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_shape(v: usize, l: usize) -> PolicyShape {
        PolicyShape::new(PolicyKind::Tabular, Vocabulary::plain(v).unwrap(), 1, l).unwrap()
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(2, 0, 1).is_err());
        assert!(Vocabulary::new(4, 2, 2).is_err());
        assert!(Vocabulary::new(4, 2, 4).is_err());
        let v = Vocabulary::new(5, 3, 4).unwrap();
        assert_eq!(v.continuing_count(), 4);
        assert!(v.is_eos(4));
    }

    #[test]
    fn uniform_two_token_sampling_is_balanced() {
        let policy = PolicyParams::uniform(plain_shape(2, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let ones = (0..n)
            .filter(|_| policy.sample_trajectory(0, 1, &mut rng).unwrap().tokens[0] == 1)
            .count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones - 0.5 * n as f64).abs() < 3.0 * sigma, "{ones}");
    }

    #[test]
    fn saturated_policy_samples_first_token() {
        let mut policy = PolicyParams::uniform(plain_shape(2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for prefix in [vec![], vec![0], vec![0, 0]] {
            policy.set_tabular_logits(0, &prefix, &[50.0, 0.0]).unwrap();
        }
        let traj = policy.sample_trajectory(0, 3, &mut rng).unwrap();
        assert_eq!(traj.tokens, vec![0, 0, 0]);
        assert!(traj.log_mu.abs() < 3.0 * 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let vocab = Vocabulary::new(5, 3, 4).unwrap();
        let shape = PolicyShape::new(PolicyKind::Tabular, vocab, 2, 4).unwrap();
        let policy = PolicyParams::random(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let a = policy.sample_trajectory(1, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = policy.sample_trajectory(1, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!((policy.log_prob(1, &a.tokens).unwrap() - a.log_mu).abs() < 1e-12);
    }

    #[test]
    fn uniform_single_token_gradient() {
        let policy = PolicyParams::uniform(plain_shape(2, 1));
        let traj = Trajectory::unscored(0, vec![0], 0.5_f64.ln());
        let (lp, grad) = policy.log_prob_and_grad(&traj).unwrap();
        assert!((lp - 0.5_f64.ln()).abs() < 1e-15);
        assert!((grad[0] - 0.5).abs() < 1e-15);
        assert!((grad[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let mut policy = PolicyParams::uniform(plain_shape(3, 1));
        policy.set_tabular_logits(0, &[], &[40.0, 0.0, 0.0]).unwrap();
        let traj = Trajectory::unscored(0, vec![0], 0.0);
        let (_, grad) = policy.log_prob_and_grad(&traj).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let policy = PolicyParams::uniform(plain_shape(2, 2));
        let traj = Trajectory::unscored(0, vec![0, 2], -1.0);
        assert!(matches!(
            policy.log_prob_and_grad(&traj),
            Err(Error::TokenOutOfRange { token: 2, .. })
        ));
    }

    #[test]
    fn eos_must_be_last() {
        let vocab = Vocabulary::new(3, 1, 2).unwrap();
        let shape = PolicyShape::new(PolicyKind::Tabular, vocab, 1, 3).unwrap();
        let policy = PolicyParams::uniform(shape);
        assert!(policy.log_prob(0, &[2, 0]).is_err());
        assert!(policy.log_prob(0, &[0, 2]).is_ok());
    }

    #[test]
    fn enumeration_small_cases() {
        let p1 = PolicyParams::uniform(plain_shape(2, 1));
        let s1 = p1.enumerate_support(0, 1).unwrap();
        assert_eq!(s1, vec![(vec![0], 0.5), (vec![1], 0.5)]);

        let p2 = PolicyParams::uniform(plain_shape(2, 2));
        let s2 = p2.enumerate_support(0, 2).unwrap();
        assert_eq!(s2.len(), 4);
        assert!(s2.iter().all(|(_, p)| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn enumeration_respects_eos_and_cap() {
        let vocab = Vocabulary::new(3, 0, 2).unwrap();
        let shape = PolicyShape::new(PolicyKind::Tabular, vocab, 1, 3).unwrap();
        let policy = PolicyParams::random(shape, 2.0, &mut ChaCha8Rng::seed_from_u64(5));
        let support = policy.enumerate_support(0, 3).unwrap();
        // eos at 1, 2 or 3, or 2^3 eos-free sequences of length 3
        assert_eq!(support.len(), 1 + 2 + 4 + 8);
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);

        let big = PolicyShape::new(PolicyKind::FeatureLinear, Vocabulary::plain(10).unwrap(), 1, 7).unwrap();
        assert!(matches!(
            PolicyParams::uniform(big).enumerate_support(0, 7),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn tabular_contexts_are_distinct() {
        let vocab = Vocabulary::new(4, 2, 3).unwrap();
        let shape = PolicyShape::new(PolicyKind::Tabular, vocab, 2, 3).unwrap();
        // contexts per prompt: 1 + 3 + 9
        assert_eq!(shape.num_params(), 2 * 13 * 4);
        let policy = PolicyParams::uniform(shape.clone());
        let mut seen = std::collections::HashSet::new();
        for p in 0..2 {
            let mut prefixes: Vec<Vec<TokenId>> = vec![vec![]];
            for a in [0, 1, 2] {
                prefixes.push(vec![a]);
                for b in [0, 1, 2] {
                    prefixes.push(vec![a, b]);
                }
            }
            for prefix in prefixes {
                let start = policy.cursor_at(p, &prefix).blocks().starts[0];
                assert!(seen.insert(start), "duplicate block for {p} {prefix:?}");
                assert!(start + 4 <= shape.num_params());
            }
        }
    }

    #[test]
    fn linear_policy_blocks_sum() {
        let vocab = Vocabulary::new(4, 2, 3).unwrap();
        let shape = PolicyShape::new(PolicyKind::FeatureLinear, vocab, 2, 3).unwrap();
        assert_eq!(shape.num_params(), (2 + 3 + 5) * 4);
        let mut policy = PolicyParams::uniform(shape);
        policy.linear_block_mut(LinearBlock::Prompt(1)).unwrap()[0] = 1.0;
        policy.linear_block_mut(LinearBlock::Position(1)).unwrap()[0] = 2.0;
        policy.linear_block_mut(LinearBlock::Previous(Some(2))).unwrap()[0] = 4.0;
        assert_eq!(policy.logits(1, &[2]).unwrap()[0], 7.0);
        assert_eq!(policy.logits(0, &[2]).unwrap()[0], 6.0);
        assert_eq!(policy.logits(1, &[]).unwrap()[0], 1.0);
    }
}
