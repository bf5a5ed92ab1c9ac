//! Greedy structure search over the sparse model class.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::DVector;
use ndarray::{Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrete::{DirichletModel, DiscreteLayerModel, DiscreteLayerSpec, MAX_GENERALISED_DEPTH};
use crate::error::{Error, Result};
use crate::hierarchy::{run_stack, BottomObservations, ChildTarget, DiscreteLayer, Layer, LayerStack, LinkSpec, MAX_STACK_DEPTH};
use crate::inference::{update_parameters, InferenceOptions, Obs};
use crate::rslds::{fit_em, fit_from_data, kinematic_model, FitOptions, MAX_GENERALISED_ORDER};

pub const MAX_FACTORS: usize = 3;
pub const MIN_FACTOR_SIZE: usize = 2;
pub const MAX_FACTOR_SIZE: usize = 8;
pub const MAX_HORIZON: usize = 16;
pub const MAX_REGIMES: usize = 8;
/// Concentration of the flat Dirichlet prior on every discrete map.
pub const PRIOR_CONCENTRATION: f64 = 1.0;
/// Minimum free-energy gain for a move to be accepted.
pub const ACCEPT_GAIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerKnobs {
    pub factor_sizes: Vec<usize>,
    pub generalised_depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContinuousKnobs {
    pub regimes: usize,
    /// Number of derivatives carried in the latent state.
    pub order: usize,
}

/// A point in the structure space. Discrete data uses `layers` (top to
/// bottom); continuous data uses `continuous` alone.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructureKnobs {
    #[serde(default)]
    pub layers: Vec<LayerKnobs>,
    #[serde(default)]
    pub continuous: Option<ContinuousKnobs>,
    /// Steps per inference window at the bottom layer (discrete only).
    #[serde(default = "one")]
    pub horizon: usize,
    /// Per bottom-layer base factor: whether actions drive its transitions.
    #[serde(default)]
    pub controllable: Vec<bool>,
}

fn one() -> usize {
    1
}

impl StructureKnobs {
    /// Single discrete layer, one factor of `size` states.
    pub fn discrete(size: usize, horizon: usize) -> Self {
        Self {
            layers: vec![LayerKnobs {
                factor_sizes: vec![size],
                generalised_depth: 0,
            }],
            continuous: None,
            horizon,
            controllable: vec![false],
        }
    }

    pub fn continuous(regimes: usize, order: usize) -> Self {
        Self {
            layers: Vec::new(),
            continuous: Some(ContinuousKnobs { regimes, order }),
            horizon: 1,
            controllable: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len() + usize::from(self.continuous.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        let depth = self.depth();
        if depth == 0 || depth > MAX_STACK_DEPTH {
            return Err(Error::DepthExceeded {
                depth,
                max: MAX_STACK_DEPTH,
            });
        }
        if let Some(c) = self.continuous {
            if !self.layers.is_empty() {
                return bad("discrete layers above a continuous layer are outside the search space".into());
            }
            if !(1..=MAX_REGIMES).contains(&c.regimes) {
                return bad(format!("regime count {} outside 1..={MAX_REGIMES}", c.regimes));
            }
            if c.order > MAX_GENERALISED_ORDER {
                return bad(format!("order {} above {MAX_GENERALISED_ORDER}", c.order));
            }
            if !self.controllable.is_empty() {
                return bad("continuous layers have no controllability flags".into());
            }
            return Ok(());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let n = layer.factor_sizes.len();
            if !(1..=MAX_FACTORS).contains(&n) {
                return bad(format!("layer {i} has {n} factors"));
            }
            if layer.factor_sizes.iter().any(|&s| !(MIN_FACTOR_SIZE..=MAX_FACTOR_SIZE).contains(&s)) {
                return bad(format!("layer {i} factor size outside {MIN_FACTOR_SIZE}..={MAX_FACTOR_SIZE}"));
            }
            if layer.generalised_depth > MAX_GENERALISED_DEPTH {
                return bad(format!("layer {i} generalised depth {}", layer.generalised_depth));
            }
        }
        if !(1..=MAX_HORIZON).contains(&self.horizon) {
            return bad(format!("horizon {} outside 1..={MAX_HORIZON}", self.horizon));
        }
        let bottom = self.layers.last().expect("depth checked");
        if self.controllable.len() != bottom.factor_sizes.len() {
            return bad("one controllability flag per bottom factor".into());
        }
        for spec in self.discrete_specs(&[2], 2) {
            spec.check()?;
        }
        Ok(())
    }

    /// Layer specs, top to bottom, for data with the given modalities and
    /// action count.
    fn discrete_specs(&self, modality_sizes: &[usize], num_actions: usize) -> Vec<DiscreteLayerSpec> {
        let n = self.layers.len();
        (0..n)
            .map(|i| {
                let layer = &self.layers[i];
                let mut spec = if i + 1 == n {
                    DiscreteLayerSpec::new(layer.factor_sizes.clone(), modality_sizes.to_vec(), self.horizon)
                } else {
                    DiscreteLayerSpec::new(layer.factor_sizes.clone(), vec![self.layers[i + 1].factor_sizes[0]], 1)
                };
                spec = spec.with_generalised(layer.generalised_depth, Vec::new(), Vec::new());
                if i + 1 == n {
                    for (f, &c) in self.controllable.iter().enumerate() {
                        if c {
                            spec = spec.with_control(f, num_actions.max(1));
                        }
                    }
                }
                spec
            })
            .collect()
    }
}

/// All single-knob edits of `s` that stay inside the class, in a fixed
/// order: depth, then per layer (top first) factor count, factor sizes and
/// generalised depth, then horizon, regimes, order, and flag toggles.
pub fn neighbors(s: &StructureKnobs) -> Vec<StructureKnobs> {
    let mut out: Vec<StructureKnobs> = Vec::new();
    let mut push = |k: StructureKnobs| {
        if k != *s && k.validate().is_ok() && !out.contains(&k) {
            out.push(k);
        }
    };
    if let Some(c) = s.continuous {
        for regimes in [c.regimes.wrapping_sub(1), c.regimes + 1] {
            push(StructureKnobs::continuous(regimes, c.order));
        }
        for order in [c.order.wrapping_sub(1), c.order + 1] {
            push(StructureKnobs::continuous(c.regimes, order));
        }
        return out;
    }

    if s.layers.len() > 1 {
        let mut k = s.clone();
        k.layers.remove(0);
        push(k);
    }
    {
        let mut k = s.clone();
        let top = s.layers[0].factor_sizes[0];
        k.layers.insert(
            0,
            LayerKnobs {
                factor_sizes: vec![top],
                generalised_depth: 0,
            },
        );
        push(k);
    }
    let bottom = s.layers.len() - 1;
    for i in 0..s.layers.len() {
        let layer = &s.layers[i];
        if layer.factor_sizes.len() > 1 {
            let mut k = s.clone();
            k.layers[i].factor_sizes.pop();
            if i == bottom {
                k.controllable.pop();
            }
            push(k);
        }
        {
            let mut k = s.clone();
            k.layers[i].factor_sizes.push(2);
            if i == bottom {
                k.controllable.push(false);
            }
            push(k);
        }
        for f in 0..layer.factor_sizes.len() {
            for delta in [-1i64, 1] {
                let mut k = s.clone();
                k.layers[i].factor_sizes[f] = (layer.factor_sizes[f] as i64 + delta).max(0) as usize;
                push(k);
            }
        }
        for g in [layer.generalised_depth.wrapping_sub(1), layer.generalised_depth + 1] {
            let mut k = s.clone();
            k.layers[i].generalised_depth = g;
            push(k);
        }
    }
    for h in [s.horizon.wrapping_sub(1), s.horizon + 1] {
        let mut k = s.clone();
        k.horizon = h;
        push(k);
    }
    for f in 0..s.controllable.len() {
        let mut k = s.clone();
        k.controllable[f] = !k.controllable[f];
        push(k);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEpisode {
    /// `[t][modality]`.
    pub observations: Vec<Vec<Obs>>,
    /// One action per transition; empty for passive data.
    #[serde(default)]
    pub actions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Discrete {
        modality_sizes: Vec<usize>,
        num_actions: usize,
        episodes: Vec<DiscreteEpisode>,
    },
    Continuous {
        dt: f64,
        trajectories: Vec<Vec<DVector<f64>>>,
    },
}

impl Dataset {
    pub fn is_empty(&self) -> bool {
        match self {
            Dataset::Discrete { episodes, .. } => episodes.iter().all(|e| e.observations.is_empty()),
            Dataset::Continuous { trajectories, .. } => trajectories.iter().all(|t| t.is_empty()),
        }
    }

    /// Number of observed time steps.
    pub fn len(&self) -> usize {
        match self {
            Dataset::Discrete { episodes, .. } => episodes.iter().map(|e| e.observations.len()).sum(),
            Dataset::Continuous { trajectories, .. } => trajectories.iter().map(Vec::len).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceScore {
    /// Nats, lower is better; +∞ for candidates whose fit failed.
    pub free_energy: f64,
    pub parameter_count: usize,
    pub fit_seconds: f64,
}

/// Episodes cut into `horizon`-step windows; the last window of each episode
/// is padded with missing observations and action 0.
fn chunk_episodes(episodes: &[DiscreteEpisode], horizon: usize, modalities: usize) -> Vec<(Vec<Vec<Obs>>, Vec<usize>)> {
    let mut out = Vec::new();
    for ep in episodes {
        let steps = ep.observations.len();
        let mut start = 0;
        while start < steps {
            let mut obs: Vec<Vec<Obs>> = ep.observations[start..(start + horizon).min(steps)].to_vec();
            obs.resize(horizon, vec![Obs::Missing; modalities]);
            let actions = (0..horizon.saturating_sub(1))
                .map(|t| ep.actions.get(start + t).copied().unwrap_or(0))
                .collect();
            out.push((obs, actions));
            start += horizon;
        }
    }
    out
}

/// Count tensors of every map: likelihoods, transitions, then initial priors.
type Counts = Vec<ArrayD<f64>>;

fn counts_diff(a: &DirichletModel, b: &DirichletModel) -> Counts {
    let maps = |d: &DirichletModel| -> Vec<ArrayD<f64>> {
        d.likelihood
            .iter()
            .chain(&d.transitions)
            .chain(&d.initial)
            .map(|c| c.counts().clone())
            .collect()
    };
    maps(a).into_iter().zip(maps(b)).map(|(x, y)| x - y).collect()
}

/// `q += sign · delta`, floored at zero against rounding.
fn add_counts(q: &mut DirichletModel, delta: &Counts, sign: f64) {
    let maps = q
        .likelihood
        .iter_mut()
        .chain(q.transitions.iter_mut())
        .chain(q.initial.iter_mut());
    for (c, d) in maps.zip(delta) {
        let counts = c.counts_mut();
        counts.zip_mut_with(d, |x, &y| *x = (*x + sign * y).max(0.0));
    }
}

fn zero_preferences(spec: &DiscreteLayerSpec) -> Vec<Array2<f64>> {
    spec.modality_sizes
        .iter()
        .map(|&n| Array2::zeros((spec.horizon, n)))
        .collect()
}

/// Random initialisations tried per discrete fit.
/// Random restarts and window length of multi-regime continuous fits.
pub const CONTINUOUS_RESTARTS: usize = 4;
pub const CONTINUOUS_RESTART_WINDOW: usize = 20;
pub const DISCRETE_RESTARTS: usize = 16;

struct VbProblem<'a> {
    specs: Vec<DiscreteLayerSpec>,
    priors: Vec<DirichletModel>,
    prefs: Vec<Vec<Array2<f64>>>,
    links: Vec<LinkSpec>,
    chunks: Vec<(Vec<Vec<Obs>>, Vec<usize>)>,
    controls: usize,
    options: &'a InferenceOptions,
}

struct VbState {
    posteriors: Vec<DirichletModel>,
    /// Counts contributed by each chunk, per layer.
    stats: Vec<Option<Vec<Counts>>>,
}

impl VbProblem<'_> {
    fn depth(&self) -> usize {
        self.specs.len()
    }

    fn run(&self, posteriors: &[DirichletModel], c: usize) -> Result<(crate::hierarchy::StackPosterior, Vec<Vec<usize>>)> {
        let (obs, actions) = &self.chunks[c];
        let depth = self.depth();
        let stack = LayerStack {
            layers: posteriors
                .iter()
                .zip(&self.prefs)
                .map(|(d, p)| {
                    Layer::Discrete(DiscreteLayer {
                        model: d.mean_model(p),
                        dirichlet: Some(d.clone()),
                    })
                })
                .collect(),
            links: self.links.clone(),
            options: self.options.clone(),
        };
        let bottom_actions: Vec<Vec<usize>> = actions.iter().map(|&a| vec![a; self.controls]).collect();
        let mut layer_actions = vec![Vec::new(); depth];
        layer_actions[depth - 1] = vec![bottom_actions.clone()];
        let out = run_stack(&stack, &BottomObservations::Discrete(vec![obs.clone()]), &layer_actions)?;
        Ok((out, bottom_actions))
    }

    /// Visits every chunk once, swapping its old statistics for new ones.
    fn pass(&self, state: &mut VbState) -> Result<()> {
        let depth = self.depth();
        for c in 0..self.chunks.len() {
            if let Some(old) = state.stats[c].take() {
                for (q, d) in state.posteriors.iter_mut().zip(&old) {
                    add_counts(q, d, -1.0);
                }
            }
            let (out, bottom_actions) = self.run(&state.posteriors, c)?;
            let mut deltas = Vec::with_capacity(depth);
            for (i, layer) in out.layers.iter().enumerate() {
                let crate::hierarchy::WindowResult::Discrete(result) = &layer.windows[0] else {
                    unreachable!()
                };
                let (layer_obs, layer_actions) = if i + 1 == depth {
                    (self.chunks[c].0.clone(), bottom_actions.clone())
                } else {
                    let rows = layer.evidence[0]
                        .iter()
                        .map(|ll| vec![Obs::LogLikelihood(ll.clone())])
                        .collect();
                    (rows, Vec::new())
                };
                let q = &state.posteriors[i];
                let updated = update_parameters(q, &result.posterior, &layer_obs, &layer_actions, 1.0)?;
                let mut delta = counts_diff(&updated, q);
                if i > 0 {
                    // The parent overrides the linked initial prior.
                    let n = delta.len() - updated.initial.len();
                    delta[n].fill(0.0);
                }
                deltas.push(delta);
            }
            for (q, d) in state.posteriors.iter_mut().zip(&deltas) {
                add_counts(q, d, 1.0);
            }
            state.stats[c] = Some(deltas);
        }
        Ok(())
    }

    fn complexity(&self, posteriors: &[DirichletModel]) -> Result<f64> {
        let mut total = 0.0;
        for (q, p) in posteriors.iter().zip(&self.priors) {
            total += q.kl_from(p)?;
        }
        Ok(total)
    }

    /// A random start and one pass, after which the start's pseudo-counts
    /// are removed, then a second pass.
    fn start(&self, rng: &mut ChaCha8Rng) -> Result<VbState> {
        let scale = self.chunks.len() as f64;
        let posteriors: Vec<DirichletModel> = self
            .specs
            .iter()
            .map(|s| {
                let random = DiscreteLayerModel::random(s.clone(), rng, 1.0)?;
                DirichletModel::from_model(&random, scale, PRIOR_CONCENTRATION)
            })
            .collect::<Result<_>>()?;
        let offset: Vec<Counts> = posteriors.iter().zip(&self.priors).map(|(q, p)| counts_diff(q, p)).collect();
        let mut state = VbState {
            posteriors,
            stats: vec![None; self.chunks.len()],
        };
        self.pass(&mut state)?;
        for (q, d) in state.posteriors.iter_mut().zip(&offset) {
            add_counts(q, d, -1.0);
        }
        self.pass(&mut state)?;
        Ok(state)
    }
}

/// Fits a discrete structure by incremental variational Bayes from
/// `restarts` random starts (at least two data passes each) and keeps the
/// lowest free energy. Returns
/// the total free energy (summed over windows, plus the Dirichlet KL) and
/// the posterior counts per layer.
pub fn fit_discrete(
    knobs: &StructureKnobs,
    modality_sizes: &[usize],
    num_actions: usize,
    episodes: &[DiscreteEpisode],
    passes: usize,
    restarts: usize,
    seed: u64,
) -> Result<(f64, Vec<DirichletModel>)> {
    knobs.validate()?;
    let specs = knobs.discrete_specs(modality_sizes, num_actions);
    let chunks = chunk_episodes(episodes, knobs.horizon, modality_sizes.len());
    if chunks.is_empty() {
        return Err(Error::InvalidValue("dataset is empty".into()));
    }
    let options = InferenceOptions::default();
    let problem = VbProblem {
        priors: specs
            .iter()
            .map(|s| DirichletModel::flat(s.clone(), PRIOR_CONCENTRATION))
            .collect::<Result<_>>()?,
        prefs: specs.iter().map(zero_preferences).collect(),
        links: (1..specs.len())
            .map(|i| LinkSpec {
                parent_modality: 0,
                child_target: ChildTarget::InitialState { factor: 0 },
                temporal_ratio: specs[i].horizon,
            })
            .collect(),
        specs,
        chunks,
        controls: knobs.controllable.iter().filter(|&&c| c).count(),
        options: &options,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<DirichletModel>)> = None;
    for _ in 0..restarts.max(1) {
        let mut state = problem.start(&mut rng)?;
        for _ in 2..passes {
            problem.pass(&mut state)?;
        }
        let mut total = problem.complexity(&state.posteriors)?;
        for c in 0..problem.chunks.len() {
            total += problem.run(&state.posteriors, c)?.0.free_energy();
        }
        if !total.is_finite() {
            return Err(Error::FitDiverged("non-finite free energy".into()));
        }
        if best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((total, state.posteriors));
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Continuous score: negative log-evidence of the fitted model plus the
/// BIC penalty `½ · parameters · ln(steps)`.
fn score_continuous(c: ContinuousKnobs, dt: f64, data: &[Vec<DVector<f64>>], budget: usize, seed: u64) -> Result<(f64, usize)> {
    let p = data
        .iter()
        .find_map(|t| t.first())
        .map(|y| y.len())
        .ok_or_else(|| Error::InvalidValue("dataset is empty".into()))?;
    let (mut sq, mut n) = (0.0, 0usize);
    for traj in data {
        for w in traj.windows(2) {
            sq += (&w[1] - &w[0]).norm_squared() / p as f64;
            n += 1;
        }
    }
    let increment_var = if n > 0 { (sq / n as f64).max(1e-12) } else { 1.0 };
    let base = kinematic_model(p, c.order, dt, (increment_var / dt).sqrt(), 0.1 * increment_var)?;
    let single = fit_em(
        &base,
        data,
        &FitOptions {
            iterations: budget,
            learn_rule: false,
            ..Default::default()
        },
    )?;
    let fit = if c.regimes == 1 {
        single
    } else {
        fit_from_data(
            &single.model,
            c.regimes,
            data,
            &FitOptions {
                iterations: budget,
                ..Default::default()
            },
            CONTINUOUS_RESTARTS,
            CONTINUOUS_RESTART_WINDOW,
            seed,
        )?
    };
    let evidence = *fit.trace.last().expect("trace holds the initial value");
    let params = fit.model.parameter_count();
    let steps: usize = data.iter().map(Vec::len).sum();
    Ok((-evidence + 0.5 * params as f64 * (steps as f64).ln(), params))
}

/// Default fit budget: data passes for discrete structures, EM iterations
/// for continuous ones.
pub fn default_budget(s: &StructureKnobs) -> usize {
    if s.continuous.is_some() {
        10
    } else {
        3
    }
}

pub fn score(s: &StructureKnobs, dataset: &Dataset, budget: usize, seed: u64) -> Result<EvidenceScore> {
    if dataset.is_empty() {
        return Err(Error::InvalidValue("dataset is empty".into()));
    }
    s.validate()?;
    let start = Instant::now();
    let (free_energy, parameter_count) = match (dataset, s.continuous) {
        (
            Dataset::Discrete {
                modality_sizes,
                num_actions,
                episodes,
            },
            None,
        ) => {
            let (f, posteriors) = fit_discrete(s, modality_sizes, *num_actions, episodes, budget, DISCRETE_RESTARTS, seed)?;
            (f, posteriors.iter().map(DirichletModel::parameter_count).sum())
        }
        (Dataset::Continuous { dt, trajectories }, Some(c)) => score_continuous(c, *dt, trajectories, budget, seed)?,
        _ => return Err(Error::InvalidModel("structure kind does not match the dataset".into())),
    };
    if !free_energy.is_finite() {
        return Err(Error::FitDiverged("non-finite free energy".into()));
    }
    Ok(EvidenceScore {
        free_energy,
        parameter_count,
        fit_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    /// Maximum number of accepted moves.
    pub move_budget: usize,
    /// Fit budget per candidate; `None` uses [`default_budget`].
    pub fit_budget: Option<usize>,
    /// Stop once this many distinct structures have been scored.
    pub max_fits: Option<usize>,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            move_budget: 10,
            fit_budget: None,
            max_fits: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Neighbourhood sweep (0 is the initial structure).
    pub sweep: usize,
    pub knobs: StructureKnobs,
    /// None when the fit failed (free energy +∞).
    pub free_energy: Option<f64>,
    pub parameter_count: usize,
    pub fit_seconds: Option<f64>,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TraceRecord {
    pub fn score(&self) -> f64 {
        self.free_energy.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: StructureKnobs,
    pub best_score: EvidenceScore,
    pub trace: Vec<TraceRecord>,
    /// Distinct structures scored.
    pub fits: usize,
}

impl SearchOutcome {
    /// Line-delimited JSON records; timings are dropped unless requested so
    /// that traces are reproducible.
    pub fn trace_lines(&self, include_timing: bool) -> String {
        let mut out = String::new();
        for rec in &self.trace {
            let mut rec = rec.clone();
            if !include_timing {
                rec.fit_seconds = None;
            }
            out.push_str(&serde_json::to_string(&rec).expect("trace record serialises"));
            out.push('\n');
        }
        out
    }
}

fn record(sweep: usize, knobs: &StructureKnobs, result: &Result<EvidenceScore>) -> TraceRecord {
    match result {
        Ok(s) => TraceRecord {
            sweep,
            knobs: knobs.clone(),
            free_energy: Some(s.free_energy),
            parameter_count: s.parameter_count,
            fit_seconds: Some(s.fit_seconds),
            accepted: false,
            error: None,
        },
        Err(e) => TraceRecord {
            sweep,
            knobs: knobs.clone(),
            free_energy: None,
            parameter_count: 0,
            fit_seconds: None,
            accepted: false,
            error: Some(e.to_string()),
        },
    }
}

/// Hill-climbing over [`neighbors`]. Each sweep scores the whole
/// neighbourhood and moves to the best candidate if it lowers the free
/// energy by more than [`ACCEPT_GAIN`]; near-ties go to fewer parameters,
/// then to neighbour order.
pub fn greedy_search(init: &StructureKnobs, dataset: &Dataset, options: &SearchOptions) -> Result<SearchOutcome> {
    init.validate()?;
    if options.move_budget == 0 {
        return Err(Error::InvalidValue("move budget must be at least 1".into()));
    }
    let budget = options.fit_budget.unwrap_or_else(|| default_budget(init));
    let mut cache: HashMap<StructureKnobs, Result<EvidenceScore>> = HashMap::new();
    let initial = score(init, dataset, budget, options.seed);
    let mut current_score = initial.clone()?;
    let mut first = record(0, init, &initial);
    first.accepted = true;
    let mut trace = vec![first];
    cache.insert(init.clone(), initial);
    let mut current = init.clone();

    for sweep in 1..=options.move_budget {
        let candidates = neighbors(&current);
        let fresh: Vec<&StructureKnobs> = candidates.iter().filter(|k| !cache.contains_key(*k)).collect();
        let room = options.max_fits.map_or(usize::MAX, |m| m.saturating_sub(cache.len()));
        let fresh = &fresh[..fresh.len().min(room)];
        let scored: Vec<Result<EvidenceScore>> = fresh
            .par_iter()
            .map(|k| score(k, dataset, budget, options.seed))
            .collect();
        for (k, s) in fresh.iter().zip(scored) {
            cache.insert((*k).clone(), s);
        }
        let start = trace.len();
        for k in &candidates {
            if let Some(s) = cache.get(k) {
                trace.push(record(sweep, k, s));
            }
        }
        let mut best: Option<usize> = None;
        for i in start..trace.len() {
            let rec = &trace[i];
            if rec.free_energy.is_none() {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (fb, fi) = (trace[b].score(), rec.score());
                    let tie = (fb - fi).abs() <= ACCEPT_GAIN;
                    if (!tie && fi < fb) || (tie && rec.parameter_count < trace[b].parameter_count) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        match best {
            Some(b) if trace[b].score() < current_score.free_energy - ACCEPT_GAIN => {
                trace[b].accepted = true;
                current = trace[b].knobs.clone();
                current_score = cache[&current].clone()?;
            }
            _ => break,
        }
        if options.max_fits.is_some_and(|m| cache.len() >= m) {
            break;
        }
    }
    Ok(SearchOutcome {
        best: current,
        best_score: current_score,
        trace,
        fits: cache.len(),
    })
}
