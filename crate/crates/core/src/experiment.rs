//! Config-driven experiment runner behind the `taperlab` binary.
//!
//! Every run writes into an output directory: a config snapshot, the suite,
//! per-iteration training logs and evaluation tables, and the final policy.
//! Outputs are a pure function of the config, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    baseline_for_target, compose, generate_dataset, CompositionSpec, Dataset,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::numeric::format_sig9;
use crate::objectives::{MethodConfig, MethodKind};
use crate::policy::{PolicyKind, PolicyParams};
use crate::task::{base_policy, build_suite, BasePolicyConfig, TaskConfig, TaskSuite};
use crate::trainer::{train_iteration_probed, IterationSchedule, OptimizerConfig, Probe, TrainLog};

/// Stream offsets keep training, evaluation and composition randomness
/// independent of one another.
const EVAL_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub n_prompts: usize,
    pub task: TaskConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_prompts: 16,
            task: TaskConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub seed: u64,
    pub base: BasePolicyConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::FeatureLinear,
            seed: 2,
            base: BasePolicyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples_per_prompt: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples_per_prompt: 16,
            ks: vec![1, 4, 16],
        }
    }
}

/// Effective-proportion grid for `sweep-proportion`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub targets: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            targets: vec![0.1, 0.25, 0.5, 0.75, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub suite: SuiteConfig,
    pub policy: PolicyConfig,
    pub methods: Vec<MethodConfig>,
    pub schedule: IterationSchedule,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            suite: SuiteConfig::default(),
            policy: PolicyConfig::default(),
            methods: [MethodKind::Topr, MethodKind::Naive, MethodKind::Ppo, MethodKind::Dpo]
                .into_iter()
                .map(MethodConfig::new)
                .collect(),
            schedule: IterationSchedule::new(3, CompositionSpec::uniform(256, 16)),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.suite.task.validate()?;
        if self.suite.n_prompts == 0 {
            return Err(Error::Config("suite.n_prompts must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        self.methods.iter().try_for_each(MethodConfig::validate)?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.eval.n_samples_per_prompt == 0 {
            return Err(Error::Config("eval.n_samples_per_prompt must be at least 1".into()));
        }
        if let Some(&k) = self
            .eval
            .ks
            .iter()
            .find(|&&k| k == 0 || k > self.eval.n_samples_per_prompt)
        {
            return Err(Error::Config(format!(
                "eval K = {k} is outside 1..={}",
                self.eval.n_samples_per_prompt
            )));
        }
        if let Some(t) = self.sweep.targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("sweep targets must be in (0, 1), got {t}")));
        }
        Ok(())
    }

    /// Applies command-line overrides. `method` replaces the method list with
    /// that method's defaults; `baseline` is then set on every method.
    pub fn apply_overrides(&mut self, seed: Option<u64>, method: Option<MethodKind>, baseline: Option<f64>) -> Result<()> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(kind) = method {
            let keep = self.methods.iter().find(|m| m.kind == kind).cloned();
            self.methods = vec![keep.unwrap_or_else(|| MethodConfig::new(kind))];
        }
        if let Some(c) = baseline {
            for m in &mut self.methods {
                m.baseline = c;
            }
        }
        self.validate()
    }

    /// Directory-safe label for each method, unique within the config.
    pub fn method_labels(&self) -> Vec<String> {
        let base: Vec<String> = self
            .methods
            .iter()
            .map(|m| {
                if m.baseline == 0.0 {
                    m.kind.to_string()
                } else {
                    format!("{}_c{}", m.kind, m.baseline)
                }
            })
            .collect();
        base.iter()
            .enumerate()
            .map(|(i, l)| {
                if base.iter().filter(|b| *b == l).count() > 1 {
                    format!("{l}_{i}")
                } else {
                    l.clone()
                }
            })
            .collect()
    }

    pub fn build_suite(&self) -> Result<TaskSuite> {
        build_suite(self.suite.seed, self.suite.n_prompts, &self.suite.task)
    }

    pub fn base_policy(&self, suite: &TaskSuite) -> Result<PolicyParams> {
        base_policy(suite, self.policy.kind, &self.policy.base, self.policy.seed)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

fn prepare_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let probe = out.join(".write-test");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_policy(policy: &PolicyParams, path: &Path) -> Result<()> {
    let text = serde_json::to_string(policy).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &text)
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let policy: PolicyParams =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    PolicyParams::from_values(policy.shape().clone(), policy.values().to_vec()).map(|mut p| {
        p.set_version(policy.version());
        p
    })
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let err = |e: csv::Error| Error::parse(path.display().to_string(), e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Common setup written to every artifact directory.
fn setup(cfg: &ExperimentConfig, out: &Path) -> Result<(TaskSuite, PolicyParams)> {
    cfg.validate()?;
    prepare_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;
    let suite = cfg.build_suite()?;
    suite.save(&out.join("suite.tsv"))?;
    let policy = cfg.base_policy(&suite)?;
    Ok((suite, policy))
}

/// `generate`: candidate dataset from the base policy.
pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let (suite, policy) = setup(cfg, out)?;
    save_policy(&policy, &out.join("policy.json"))?;
    let spec = cfg.schedule.composition(0);
    let data = generate_dataset(&policy, &suite, spec.n_per_prompt, &mut cfg.rng(0))?;
    data.save(&out.join("dataset.tsv"))?;
    Ok(data)
}

/// `train`: one iteration of the first configured method. Uses `dataset`
/// when given (its trajectories must come from the base policy), otherwise
/// generates and composes one.
pub fn run_train(cfg: &ExperimentConfig, out: &Path, dataset: Option<&Path>) -> Result<(PolicyParams, TrainLog)> {
    let (suite, policy) = setup(cfg, out)?;
    let mut rng = cfg.rng(0);
    let spec = cfg.schedule.composition(0);
    let data = match dataset {
        Some(path) => Dataset::load(path)?,
        None => {
            let candidates = generate_dataset(&policy, &suite, spec.n_per_prompt, &mut rng)?;
            compose(&candidates, spec, &mut rng)?
        }
    };
    let probe = Probe {
        suite: &suite,
        every: cfg.schedule.probe_every,
    };
    let (trained, log) = train_iteration_probed(&policy, &data, &cfg.methods[0], &cfg.optimizer, Some(probe), &mut rng)?;
    log.save_csv(&out.join("train_log.csv"))?;
    save_policy(&trained, &out.join("policy.json"))?;
    Ok((trained, log))
}

/// Per-iteration summary of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub expected_reward: f64,
    pub invalid_prob: f64,
    pub p_actual: Option<f64>,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub label: String,
    pub method: MethodConfig,
    pub summaries: Vec<IterationSummary>,
    pub logs: Vec<TrainLog>,
    pub final_policy: PolicyParams,
}

fn summarize(cfg: &ExperimentConfig, suite: &TaskSuite, policy: &PolicyParams, iteration: usize, p_actual: Option<f64>) -> Result<IterationSummary> {
    // every method sees the same evaluation randomness at a given iteration
    let eval = evaluate(
        policy,
        suite,
        cfg.eval.n_samples_per_prompt,
        &cfg.eval.ks,
        &mut cfg.rng(EVAL_STREAM + iteration as u64),
    )?;
    let outcomes = suite.mean_outcomes(policy)?;
    Ok(IterationSummary {
        iteration,
        expected_reward: outcomes.expected_reward(),
        invalid_prob: outcomes.invalid,
        p_actual,
        eval,
    })
}

fn summary_header(ks: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = ["iteration", "expected_reward", "invalid_prob", "p_actual", "pass_at_1", "invalid_rate"]
        .into_iter()
        .map(String::from)
        .collect();
    for k in ks {
        h.push(format!("maj_at_{k}"));
        h.push(format!("maj_at_{k}_se"));
    }
    h
}

fn summary_row(s: &IterationSummary) -> Vec<String> {
    let mut r = vec![
        s.iteration.to_string(),
        format_sig9(s.expected_reward),
        format_sig9(s.invalid_prob),
        s.p_actual.map(format_sig9).unwrap_or_default(),
        format_sig9(s.eval.pass_at_1),
        format_sig9(s.eval.invalid_rate),
    ];
    for m in &s.eval.majority {
        r.push(format_sig9(m.mean));
        r.push(format_sig9(m.se));
    }
    r
}

/// Multi-iteration run of one method, writing into `out`.
pub fn run_method(
    cfg: &ExperimentConfig,
    suite: &TaskSuite,
    policy0: &PolicyParams,
    method: &MethodConfig,
    label: &str,
    out: &Path,
) -> Result<MethodRun> {
    prepare_dir(out)?;
    // identical training randomness across methods: the first dataset is shared
    let mut rng = cfg.rng(0);
    let mut summaries = vec![summarize(cfg, suite, policy0, 0, None)?];
    summaries[0].eval.save(out, "eval_iter0")?;
    let mut logs = Vec::new();
    let mut current = policy0.clone();
    for i in 0..cfg.schedule.n_iterations {
        let spec = cfg.schedule.composition(i);
        let candidates = generate_dataset(&current, suite, spec.n_per_prompt, &mut rng)?;
        let data = compose(&candidates, spec, &mut rng)?;
        let probe = Probe {
            suite,
            every: cfg.schedule.probe_every,
        };
        let (next, log) = train_iteration_probed(&current, &data, method, &cfg.optimizer, Some(probe), &mut rng)?;
        log.save_csv(&out.join(format!("train_iter{}.csv", i + 1)))?;
        let s = summarize(cfg, suite, &next, i + 1, Some(data.p_actual()))?;
        s.eval.save(out, &format!("eval_iter{}", i + 1))?;
        summaries.push(s);
        logs.push(log);
        current = next;
    }
    let rows: Vec<Vec<String>> = summaries.iter().map(summary_row).collect();
    let header = summary_header(&cfg.eval.ks);
    write_csv(&out.join("summary.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    save_policy(&current, &out.join("policy_final.json"))?;
    Ok(MethodRun {
        label: label.to_string(),
        method: method.clone(),
        summaries,
        logs,
        final_policy: current,
    })
}

/// `iterate` and `compare`: every configured method in its own
/// subdirectory, plus merged `comparison.csv` (training logs) and
/// `summary.csv` (per-iteration metrics) with a method column.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MethodRun>> {
    let (suite, policy0) = setup(cfg, out)?;
    let labels = cfg.method_labels();
    let mut runs = Vec::with_capacity(cfg.methods.len());
    for (method, label) in cfg.methods.iter().zip(&labels) {
        runs.push(run_method(cfg, &suite, &policy0, method, label, &out.join(label))?);
    }

    let mut header = vec!["method".to_string(), "iteration".to_string()];
    header.extend(TrainLog::HEADER.iter().map(|s| s.to_string()));
    let mut rows = Vec::new();
    for run in &runs {
        for (i, log) in run.logs.iter().enumerate() {
            for r in &log.records {
                let mut row = vec![run.label.clone(), (i + 1).to_string()];
                row.extend(TrainLog::csv_fields(r));
                rows.push(row);
            }
        }
    }
    write_csv(&out.join("comparison.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;

    let mut header = vec!["method".to_string()];
    header.extend(summary_header(&cfg.eval.ks));
    let rows: Vec<Vec<String>> = runs
        .iter()
        .flat_map(|run| {
            run.summaries.iter().map(move |s| {
                let mut row = vec![run.label.clone()];
                row.extend(summary_row(s));
                row
            })
        })
        .collect();
    write_csv(&out.join("summary.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    Ok(runs)
}

/// `eval`: evaluation of the base policy, or of a saved policy.
pub fn run_eval(cfg: &ExperimentConfig, out: &Path, policy: Option<&Path>) -> Result<EvalReport> {
    let (suite, base) = setup(cfg, out)?;
    let policy = match policy {
        Some(p) => load_policy(p)?,
        None => base,
    };
    let s = summarize(cfg, &suite, &policy, 0, None)?;
    s.eval.save(out, "eval")?;
    Ok(s.eval)
}

/// One point of the effective-proportion sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub target: f64,
    pub baseline: f64,
    pub p_actual: f64,
    pub expected_reward: f64,
    pub pass_at_1: f64,
}

/// `sweep-proportion`: for every target effective proportion `p̃`, trains
/// one iteration of the first method with the baseline that realizes `p̃`
/// on the shared dataset.
pub fn run_sweep_proportion(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepPoint>> {
    let (suite, policy0) = setup(cfg, out)?;
    let mut rng = cfg.rng(0);
    let spec = cfg.schedule.composition(0);
    let candidates = generate_dataset(&policy0, &suite, spec.n_per_prompt, &mut rng)?;
    let data = compose(&candidates, spec, &mut rng)?;
    let p = data.p_actual();
    let mut points = Vec::new();
    for (i, &target) in cfg.sweep.targets.iter().enumerate() {
        let c = baseline_for_target(p, target)?;
        let method = cfg.methods[0].clone().with_baseline(c);
        let mut train_rng = cfg.rng(1 + i as u64);
        let (trained, log) = train_iteration_probed(&policy0, &data, &method, &cfg.optimizer, None, &mut train_rng)?;
        log.save_csv(&out.join(format!("train_target{i}.csv")))?;
        let s = summarize(cfg, &suite, &trained, 1, Some(p))?;
        points.push(SweepPoint {
            target,
            baseline: c,
            p_actual: p,
            expected_reward: s.expected_reward,
            pass_at_1: s.eval.pass_at_1,
        });
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|pt| {
            vec![
                format_sig9(pt.target),
                format_sig9(pt.baseline),
                format_sig9(pt.p_actual),
                format_sig9(pt.expected_reward),
                format_sig9(pt.pass_at_1),
            ]
        })
        .collect();
    write_csv(
        &out.join("sweep.csv"),
        &["target", "baseline", "p_actual", "expected_reward", "pass_at_1"],
        &rows,
    )?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.suite.n_prompts = 4;
        cfg.schedule = IterationSchedule::new(1, CompositionSpec::uniform(32, 8));
        cfg.eval = EvalConfig {
            n_samples_per_prompt: 8,
            ks: vec![1, 4, 8],
        };
        cfg.methods = vec![MethodConfig::new(MethodKind::Topr), MethodConfig::new(MethodKind::Naive)];
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = small();
        cfg.methods.push(MethodConfig::new(MethodKind::Opr));
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let err = ExperimentConfig::from_toml_str("[eval]\nn_samples_per_prompt = 2\nks = [4]\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn labels_are_unique() {
        let mut cfg = small();
        cfg.methods.push(MethodConfig::new(MethodKind::Topr));
        cfg.methods.push(MethodConfig::new(MethodKind::Topr).with_baseline(-0.5));
        assert_eq!(cfg.method_labels(), vec!["topr_0", "naive", "topr_2", "topr_c-0.5"]);
    }

    #[test]
    fn experiment_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        run_experiment(&cfg, &dir.path().join("a")).unwrap();
        run_experiment(&cfg, &dir.path().join("b")).unwrap();
        for f in ["comparison.csv", "summary.csv", "topr/train_iter1.csv", "naive/eval_iter1_metrics.csv"] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }
}
