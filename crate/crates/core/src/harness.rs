//! Experiment runner behind the `worldkit` CLI.
//!
//! A run directory holds `config.json` (the resolved config), `records.jsonl`
//! (one [`RunRecord`] per line, appended as the run proceeds),
//! `summary.json`, `model.json` and, after `plots`, three CSV tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::discrete::{DirichletModel, DiscreteLayerModel};
use crate::envs::pool::{self, PoolConfig, PoolTableEnv};
use crate::envs::tmaze::{self, Arm, TMazeEnv};
use crate::inference::{infer_states_with, update_parameters, InferenceOptions, LogParams, Obs};
use crate::planning::{plan, DEFAULT_PRECISION};
use crate::rslds::{filter, fit_em, kinematic_model, FitOptions, RsldsModel};
use crate::search::{greedy_search, Dataset, DiscreteEpisode, SearchOptions, SearchOutcome, StructureKnobs};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
/// Largest tolerated gap between a logged EFE total and its terms.
pub const EFE_LOG_TOLERANCE: f64 = 1e-12;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "search_trace.jsonl";
pub const SEARCH_RESULT_FILE: &str = "search_result.json";

/// Seed streams for [`derive_seed`].
pub const STREAM_EPISODE: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_SEARCH: u64 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("corrupt log {file}: {message} (last valid line {last_valid_line})")]
    CorruptLog {
        file: String,
        last_valid_line: usize,
        message: String,
    },
    #[error("replay mismatch at record {record}: {message}")]
    RecordMismatch { record: usize, message: String },
    #[error("replayed summary differs from {SUMMARY_FILE}")]
    SummaryMismatch,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] crate::Error),
}

impl HarnessError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            _ => 1,
        }
    }

    fn config(field: &str, message: impl Into<String>) -> Self {
        HarnessError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

type HResult<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Counter-based seed splitting: the SplitMix64 finaliser applied to
/// `master`, `stream` and `index` mixed with distinct odd constants. The
/// result depends only on its arguments, never on execution order.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TMazeParams {
    /// "random" draws the reward arm per episode; "left" or "right" fixes it.
    pub reward_arm: String,
}

impl Default for TMazeParams {
    fn default() -> Self {
        Self {
            reward_arm: "random".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub planning_horizon: usize,
    pub precision: f64,
    pub learning_rate: f64,
    /// Dirichlet counts per column of the T-maze prior.
    pub prior_scale: f64,
    /// Reward log-preference; 0 gives flat preferences.
    pub preference_strength: f64,
    /// First time step at which reward preferences apply.
    pub preference_from: usize,
    /// Inline discrete model used as the prior mean instead of the
    /// environment's default.
    pub prior_model: Option<Value>,
    /// Pool agent: "kinematic" (K = 1) or "ground_truth".
    pub pool_model: String,
    /// EM iterations after each pool episode (0 disables learning).
    pub fit_iterations: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            planning_horizon: 2,
            precision: DEFAULT_PRECISION,
            learning_rate: 1.0,
            prior_scale: 4.0,
            preference_strength: 0.0,
            preference_from: 1,
            prior_model: None,
            pool_model: "kinematic".into(),
            fit_iterations: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitKnobs {
    /// Only "minimal" is accepted.
    Named(String),
    Knobs(StructureKnobs),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub init: InitKnobs,
    pub move_budget: usize,
    pub fit_budget: Option<usize>,
    pub max_fits: Option<usize>,
    /// Episodes (or trajectories) simulated for the dataset.
    pub data_episodes: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            init: InitKnobs::Named("minimal".into()),
            move_budget: 10,
            fit_budget: None,
            max_fits: Some(200),
            data_episodes: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Pool only; the T-maze episode length is fixed.
    #[serde(default)]
    pub steps_per_episode: Option<usize>,
    /// Log wall-clock seconds per record (breaks byte-identical logs).
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub search: Option<SearchConfig>,
}

fn default_episodes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq)]
pub enum Environment {
    TMaze { reward_arm: Option<Arm> },
    Pool(PoolConfig),
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> HResult<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| HarnessError::config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> HResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> HResult<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(HarnessError::config(
                "format_version",
                format!("expected {CONFIG_FORMAT_VERSION}, got {}", self.format_version),
            ));
        }
        let env = self.environment()?;
        let a = &self.agent;
        if !(a.precision.is_finite() && a.precision > 0.0) {
            return Err(HarnessError::config("agent.precision", "must be positive"));
        }
        if !(a.learning_rate.is_finite() && a.learning_rate >= 0.0) {
            return Err(HarnessError::config("agent.learning_rate", "must be non-negative"));
        }
        if !(a.prior_scale.is_finite() && a.prior_scale > 0.0) {
            return Err(HarnessError::config("agent.prior_scale", "must be positive"));
        }
        if !a.preference_strength.is_finite() {
            return Err(HarnessError::config("agent.preference_strength", "must be finite"));
        }
        match env {
            Environment::TMaze { .. } => {
                if a.planning_horizon == 0 || a.planning_horizon > tmaze::EPISODE_ACTIONS {
                    return Err(HarnessError::config(
                        "agent.planning_horizon",
                        format!("must be in 1..={}", tmaze::EPISODE_ACTIONS),
                    ));
                }
                if self.steps_per_episode.is_some_and(|s| s != tmaze::EPISODE_ACTIONS) {
                    return Err(HarnessError::config(
                        "steps_per_episode",
                        format!("the T-maze has {} steps", tmaze::EPISODE_ACTIONS),
                    ));
                }
                if let Some(m) = &a.prior_model {
                    let model = DiscreteLayerModel::from_json_value(m)
                        .map_err(|e| HarnessError::config("agent.prior_model", e.to_string()))?;
                    if model.spec != TMazeEnv::spec() {
                        return Err(HarnessError::config("agent.prior_model", "spec differs from the T-maze layout"));
                    }
                }
            }
            Environment::Pool(_) => {
                if !matches!(a.pool_model.as_str(), "kinematic" | "ground_truth") {
                    return Err(HarnessError::config(
                        "agent.pool_model",
                        format!("unknown model `{}`", a.pool_model),
                    ));
                }
                if self.steps_per_episode == Some(0) {
                    return Err(HarnessError::config("steps_per_episode", "must be at least 1"));
                }
            }
        }
        if let Some(s) = &self.search {
            if s.move_budget == 0 {
                return Err(HarnessError::config("search.move_budget", "must be at least 1"));
            }
            if s.data_episodes == 0 {
                return Err(HarnessError::config("search.data_episodes", "must be at least 1"));
            }
            match &s.init {
                InitKnobs::Named(n) if n != "minimal" => {
                    return Err(HarnessError::config("search.init", format!("unknown init `{n}`")));
                }
                InitKnobs::Knobs(k) => k.validate().map_err(|e| HarnessError::config("search.init", e.to_string()))?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn environment(&self) -> HResult<Environment> {
        let params = if self.environment.params.is_null() {
            Value::Object(Default::default())
        } else {
            self.environment.params.clone()
        };
        match self.environment.name.as_str() {
            "t_maze" => {
                let p: TMazeParams =
                    serde_json::from_value(params).map_err(|e| HarnessError::config("environment.params", e.to_string()))?;
                let reward_arm = match p.reward_arm.as_str() {
                    "random" => None,
                    "left" => Some(Arm::Left),
                    "right" => Some(Arm::Right),
                    other => {
                        return Err(HarnessError::config(
                            "environment.params.reward_arm",
                            format!("unknown arm `{other}`"),
                        ))
                    }
                };
                Ok(Environment::TMaze { reward_arm })
            }
            "pool_table" => {
                let mut cfg: PoolConfig =
                    serde_json::from_value(params).map_err(|e| HarnessError::config("environment.params", e.to_string()))?;
                if let Some(steps) = self.steps_per_episode {
                    cfg.steps = steps;
                }
                Ok(Environment::Pool(cfg))
            }
            other => Err(HarnessError::config("environment.name", format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub actions: Vec<Vec<usize>>,
    pub risk: f64,
    pub ambiguity: f64,
    pub novelty: f64,
    pub total: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observation {
    Discrete(Vec<usize>),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub episode: usize,
    pub t: usize,
    /// Action taken after this observation; null at the last step.
    pub action: Option<Vec<usize>>,
    pub observation: Observation,
    /// Null when no planning happened at this step.
    pub policies: Option<Vec<PolicyRecord>>,
    /// Free energy of the current beliefs (discrete) or surprise
    /// `−ln p(y_t | y_<t)` (continuous).
    pub free_energy: Option<f64>,
    /// KL between updated and previous parameter beliefs, logged on the
    /// step where learning happens.
    pub info_gain: Option<f64>,
    pub wall_clock: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub environment: String,
    pub episodes: usize,
    /// Mean logged free energy per episode.
    pub mean_free_energy: Vec<f64>,
    /// Running sum of parameter information gain at the end of each episode.
    pub cumulative_info_gain: Vec<f64>,
    /// Per-episode task success; null for environments without a task.
    pub success: Option<Vec<bool>>,
    pub success_rate: Option<f64>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serialises");
        s.push('\n');
        s
    }
}

/// Recomputes the summary from ordered records.
pub fn summarise(environment: &Environment, episodes: usize, records: &[RunRecord]) -> Summary {
    let mut fe_sum = vec![0.0; episodes];
    let mut fe_n = vec![0usize; episodes];
    let mut gain = vec![0.0; episodes];
    let mut success = vec![false; episodes];
    for r in records {
        if r.episode >= episodes {
            continue;
        }
        if let Some(f) = r.free_energy {
            fe_sum[r.episode] += f;
            fe_n[r.episode] += 1;
        }
        if let Some(g) = r.info_gain {
            gain[r.episode] += g;
        }
        if let Observation::Discrete(o) = &r.observation {
            if o.get(tmaze::REWARD) == Some(&tmaze::REWARD_OUTCOME) {
                success[r.episode] = true;
            }
        }
    }
    let mean_free_energy = fe_sum
        .iter()
        .zip(&fe_n)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let mut running = 0.0;
    let cumulative_info_gain = gain
        .iter()
        .map(|g| {
            running += g;
            running
        })
        .collect();
    let (name, success, success_rate) = match environment {
        Environment::TMaze { .. } => {
            let rate = if episodes > 0 {
                Some(success.iter().filter(|&&s| s).count() as f64 / episodes as f64)
            } else {
                None
            };
            ("t_maze", Some(success), rate)
        }
        Environment::Pool(_) => ("pool_table", None, None),
    };
    Summary {
        environment: name.into(),
        episodes,
        mean_free_energy,
        cumulative_info_gain,
        success,
        success_rate,
    }
}

struct RecordWriter {
    out: BufWriter<File>,
    path: PathBuf,
    records: Vec<RunRecord>,
    timing: Option<Instant>,
}

impl RecordWriter {
    fn create(dir: &Path, record_timing: bool) -> HResult<Self> {
        let path = dir.join(RECORDS_FILE);
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
            records: Vec::new(),
            timing: record_timing.then(Instant::now),
        })
    }

    fn push(&mut self, mut record: RunRecord) -> HResult<()> {
        record.wall_clock = self.timing.map(|t| t.elapsed().as_secs_f64());
        let line = serde_json::to_string(&record).map_err(crate::Error::from)?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))?;
        self.records.push(record);
        Ok(())
    }
}

fn write_file(path: &Path, contents: &str) -> HResult<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Resolves the output directory: explicit override, then the config's
/// `output_dir`, then `runs/<environment>-<seed>`.
pub fn output_dir(config: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", config.environment.name, config.seed)))
}

/// Runs every episode of `config`, writing the run directory `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> HResult<Summary> {
    config.validate()?;
    let environment = config.environment()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let resolved = serde_json::to_string_pretty(config).map_err(crate::Error::from)? + "\n";
    write_file(&dir.join(CONFIG_FILE), &resolved)?;
    let mut writer = RecordWriter::create(dir, config.record_timing)?;
    let model_json = match &environment {
        Environment::TMaze { reward_arm } => run_tmaze(config, *reward_arm, &mut writer)?,
        Environment::Pool(cfg) => run_pool(config, cfg, &mut writer)?,
    };
    write_file(&dir.join(MODEL_FILE), &model_json)?;
    let summary = summarise(&environment, config.episodes, &writer.records);
    write_file(&dir.join(SUMMARY_FILE), &summary.to_json())?;
    Ok(summary)
}

fn run_tmaze(config: &ExperimentConfig, reward_arm: Option<Arm>, writer: &mut RecordWriter) -> HResult<String> {
    let a = &config.agent;
    let spec = TMazeEnv::spec();
    let horizon = spec.horizon;
    let mut q = match &a.prior_model {
        Some(v) => DirichletModel::from_model(&DiscreteLayerModel::from_json_value(v)?, a.prior_scale, 1e-2)?,
        None => tmaze::agent_prior(a.prior_scale)?,
    };
    let prefs = tmaze::preferences(a.preference_strength, a.preference_from);
    let learn = a.learning_rate > 0.0;
    let options = InferenceOptions::default();
    let mut env = TMazeEnv::new();
    for e in 0..config.episodes {
        let first = match reward_arm {
            Some(arm) => env.reset_with(arm),
            None => env.reset(derive_seed(config.seed, STREAM_EPISODE, e as u64)),
        };
        let mut observed: Vec<Vec<usize>> = vec![first];
        let mut obs: Vec<Vec<Obs>> = vec![vec![Obs::Missing; spec.modality_sizes.len()]; horizon];
        obs[0] = observed[0].iter().map(|&o| Obs::Outcome(o)).collect();
        let mut actions: Vec<Vec<usize>> = vec![vec![0]; horizon - 1];
        for t in 0..horizon {
            let params = LogParams::from_dirichlet(&q);
            let beliefs = infer_states_with(&spec, &params, &obs, &actions, &options)?;
            let free_energy = Some(beliefs.free_energy());
            if t + 1 < horizon {
                let model = q.mean_model(&prefs);
                let steps = a.planning_horizon.min(horizon - 1 - t);
                let p = plan(&model, learn.then_some(&q), &beliefs.posterior, t, steps, a.precision)?;
                let policies = p
                    .policies
                    .iter()
                    .zip(&p.efes)
                    .zip(&p.posterior)
                    .map(|((pol, efe), &prob)| PolicyRecord {
                        actions: pol.actions.clone(),
                        risk: efe.risk,
                        ambiguity: efe.ambiguity,
                        novelty: efe.novelty,
                        total: efe.total,
                        probability: prob,
                    })
                    .collect();
                let (next, _) = env.step(p.action[0])?;
                writer.push(RunRecord {
                    episode: e,
                    t,
                    action: Some(p.action.clone()),
                    observation: Observation::Discrete(observed[t].clone()),
                    policies: Some(policies),
                    free_energy,
                    info_gain: None,
                    wall_clock: None,
                })?;
                actions[t] = p.action;
                obs[t + 1] = next.iter().map(|&o| Obs::Outcome(o)).collect();
                observed.push(next);
            } else {
                let info_gain = if learn {
                    let updated = update_parameters(&q, &beliefs.posterior, &obs, &actions, a.learning_rate)?;
                    let gain = updated.kl_from(&q)?;
                    q = updated;
                    Some(gain)
                } else {
                    None
                };
                writer.push(RunRecord {
                    episode: e,
                    t,
                    action: None,
                    observation: Observation::Discrete(observed[t].clone()),
                    policies: None,
                    free_energy,
                    info_gain,
                    wall_clock: None,
                })?;
            }
        }
    }
    Ok(q.mean_model(&prefs).to_json() + "\n")
}

fn pool_agent(config: &ExperimentConfig, cfg: &PoolConfig) -> HResult<RsldsModel> {
    Ok(match config.agent.pool_model.as_str() {
        "ground_truth" => pool::ground_truth_model(cfg),
        _ => kinematic_model(2, 1, cfg.dt, 0.1, cfg.obs_noise * cfg.obs_noise)?,
    })
}

fn run_pool(config: &ExperimentConfig, cfg: &PoolConfig, writer: &mut RecordWriter) -> HResult<String> {
    let mut model = pool_agent(config, cfg)?;
    let learn = config.agent.fit_iterations > 0 && config.agent.learning_rate > 0.0;
    let mut env = PoolTableEnv::new(*cfg);
    let mut history: Vec<Vec<DVector<f64>>> = Vec::new();
    for e in 0..config.episodes {
        let mut ys = vec![env.reset(derive_seed(config.seed, STREAM_EPISODE, e as u64))];
        for _ in 0..cfg.steps {
            ys.push(env.step(0)?.0);
        }
        let filtered = filter(&model, &ys, None)?;
        let info_gain = if learn {
            history.push(ys.clone());
            let fit = fit_em(
                &model,
                &history,
                &FitOptions {
                    iterations: config.agent.fit_iterations,
                    learn_rule: model.num_regimes() > 1,
                    ..Default::default()
                },
            )?;
            model = fit.model;
            // Log-evidence gained on this episode by the update.
            Some(filter(&model, &ys, None)?.log_evidence - filtered.log_evidence)
        } else {
            None
        };
        for (t, (y, step)) in ys.iter().zip(&filtered.steps).enumerate() {
            let last = t == cfg.steps;
            writer.push(RunRecord {
                episode: e,
                t,
                action: (!last).then(|| vec![0]),
                observation: Observation::Continuous(y.iter().copied().collect()),
                policies: None,
                free_energy: Some(-step.log_likelihood),
                info_gain: if last { info_gain } else { None },
                wall_clock: None,
            })?;
        }
    }
    Ok(serde_json::to_string_pretty(&model).map_err(crate::Error::from)? + "\n")
}

/// Parses `records.jsonl`; a line that does not parse, or a file that does
/// not end in a newline, is reported as corrupt.
pub fn read_records(dir: &Path) -> HResult<Vec<RunRecord>> {
    let path = dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut records = Vec::new();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let corrupt = |message: String| HarnessError::CorruptLog {
            file: path.display().to_string(),
            last_valid_line: i,
            message,
        };
        let Some(body) = line.strip_suffix('\n') else {
            return Err(corrupt(format!("line {} is truncated", i + 1)));
        };
        let record: RunRecord =
            serde_json::from_str(body).map_err(|e| corrupt(format!("line {} does not parse: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Checks ordering and EFE integrity, then recomputes the summary and
/// compares it byte-for-byte with the stored one.
pub fn replay(dir: &Path) -> HResult<Summary> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let environment = config.environment()?;
    let records = read_records(dir)?;
    let mut previous: Option<(usize, usize)> = None;
    for (i, r) in records.iter().enumerate() {
        let key = (r.episode, r.t);
        if previous.is_some_and(|p| key <= p) {
            return Err(HarnessError::RecordMismatch {
                record: i,
                message: format!("(episode, t) = {key:?} out of order"),
            });
        }
        if r.episode >= config.episodes {
            return Err(HarnessError::RecordMismatch {
                record: i,
                message: format!("episode {} beyond the configured {}", r.episode, config.episodes),
            });
        }
        previous = Some(key);
        for (j, p) in r.policies.iter().flatten().enumerate() {
            let terms = p.risk + p.ambiguity - p.novelty;
            if !((p.total - terms).abs() <= EFE_LOG_TOLERANCE) {
                return Err(HarnessError::RecordMismatch {
                    record: i,
                    message: format!("policy {j}: EFE total {} but risk + ambiguity − novelty = {terms}", p.total),
                });
            }
        }
    }
    let summary = summarise(&environment, config.episodes, &records);
    let stored_path = dir.join(SUMMARY_FILE);
    let stored = fs::read_to_string(&stored_path).map_err(io_err(&stored_path))?;
    if stored != summary.to_json() {
        return Err(HarnessError::SummaryMismatch);
    }
    Ok(summary)
}

pub const PLOT_FILES: [&str; 3] = ["free_energy.csv", "info_gain.csv", "success.csv"];

/// Writes one CSV per curve, one row per episode, from the replayed summary.
pub fn emit_plots(dir: &Path) -> HResult<Vec<PathBuf>> {
    let summary = replay(dir)?;
    let mut fe = String::from("episode,mean_free_energy\n");
    let mut gain = String::from("episode,cumulative_info_gain\n");
    let mut success = String::from("episode,success\n");
    for e in 0..summary.episodes {
        fe.push_str(&format!("{e},{}\n", summary.mean_free_energy[e]));
        gain.push_str(&format!("{e},{}\n", summary.cumulative_info_gain[e]));
        match &summary.success {
            Some(s) => success.push_str(&format!("{e},{}\n", u8::from(s[e]))),
            None => success.push_str(&format!("{e},\n")),
        }
    }
    let mut paths = Vec::new();
    for (name, body) in PLOT_FILES.iter().zip([fe, gain, success]) {
        let path = dir.join(name);
        write_file(&path, &body)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Simulated dataset for structure search: T-maze episodes under seeded
/// uniformly random moves, or passive pool trajectories.
pub fn search_dataset(environment: &Environment, episodes: usize, seed: u64) -> HResult<Dataset> {
    match environment {
        Environment::TMaze { reward_arm } => {
            let spec = TMazeEnv::spec();
            let mut env = TMazeEnv::new();
            let mut out = Vec::with_capacity(episodes);
            for e in 0..episodes as u64 {
                let episode_seed = derive_seed(seed, STREAM_DATA, e);
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
                let first = match reward_arm {
                    Some(arm) => env.reset_with(*arm),
                    None => env.reset(episode_seed),
                };
                let mut observations = vec![first];
                let mut actions = Vec::new();
                for _ in 0..tmaze::EPISODE_ACTIONS {
                    let a = rng.random_range(0..tmaze::NUM_LOCATIONS);
                    observations.push(env.step(a)?.0);
                    actions.push(a);
                }
                out.push(DiscreteEpisode {
                    observations: observations
                        .iter()
                        .map(|row| row.iter().map(|&o| Obs::Outcome(o)).collect())
                        .collect(),
                    actions,
                });
            }
            Ok(Dataset::Discrete {
                modality_sizes: spec.modality_sizes,
                num_actions: tmaze::NUM_LOCATIONS,
                episodes: out,
            })
        }
        Environment::Pool(cfg) => Ok(Dataset::Continuous {
            dt: cfg.dt,
            trajectories: (0..episodes as u64)
                .map(|e| pool::rollout(cfg, derive_seed(seed, STREAM_DATA, e), cfg.steps).0)
                .collect(),
        }),
    }
}

/// Smallest structure for the environment's data. Discrete windows keep
/// the episode length so that the minimal model still sees whole episodes.
pub fn minimal_knobs(environment: &Environment) -> StructureKnobs {
    match environment {
        Environment::TMaze { .. } => StructureKnobs::discrete(2, tmaze::EPISODE_ACTIONS + 1),
        Environment::Pool(_) => StructureKnobs::continuous(1, 0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: StructureKnobs,
    pub free_energy: f64,
    pub parameter_count: usize,
    pub fits: usize,
}

/// Runs structure search on data simulated from the configured environment
/// and writes the trace and result to `dir`.
pub fn run_search(config: &ExperimentConfig, dir: &Path) -> HResult<SearchOutcome> {
    config.validate()?;
    let environment = config.environment()?;
    let search = config
        .search
        .clone()
        .ok_or_else(|| HarnessError::config("search", "missing search block"))?;
    let init = match &search.init {
        InitKnobs::Named(_) => minimal_knobs(&environment),
        InitKnobs::Knobs(k) => k.clone(),
    };
    let dataset = search_dataset(&environment, search.data_episodes, config.seed)?;
    let outcome = greedy_search(
        &init,
        &dataset,
        &SearchOptions {
            move_budget: search.move_budget,
            fit_budget: search.fit_budget,
            max_fits: search.max_fits,
            seed: derive_seed(config.seed, STREAM_SEARCH, 0),
        },
    )
    .map_err(|e| match e {
        crate::Error::InvalidModel(m) => HarnessError::config("search.init", m),
        other => other.into(),
    })?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let resolved = serde_json::to_string_pretty(config).map_err(crate::Error::from)? + "\n";
    write_file(&dir.join(CONFIG_FILE), &resolved)?;
    write_file(&dir.join(TRACE_FILE), &outcome.trace_lines(config.record_timing))?;
    let result = SearchResult {
        best: outcome.best.clone(),
        free_energy: outcome.best_score.free_energy,
        parameter_count: outcome.best_score.parameter_count,
        fits: outcome.fits,
    };
    write_file(
        &dir.join(SEARCH_RESULT_FILE),
        &(serde_json::to_string_pretty(&result).map_err(crate::Error::from)? + "\n"),
    )?;
    Ok(outcome)
}
