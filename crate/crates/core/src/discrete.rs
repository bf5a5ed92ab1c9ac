//! Discrete POMDP layer: factorised latent states with temporal, factorial and
//! generalised depth, action-conditioned transitions, and ancestral sampling.
//!
//! Tensor conventions (all normalised along axis 0):
//! - likelihood `A[m]` has shape `[outcomes_m, sizes of observed factors...]`;
//! - transition `B[f]` has shape `[size_f (next), size_f (current), modulator]`,
//!   where the modulator is the action, the next-higher generalised state, or
//!   a singleton axis for autonomous factors;
//! - preferences `C[m]` has shape `[horizon, outcomes_m]` (log-preferences).

use ndarray::{Array2, ArrayD, Axis, Dimension, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::beliefs::{Categorical, DirichletCounts, PROB_TOL};
use crate::error::{Error, Result};
use crate::tensor_json;

pub const MAX_GENERALISED_DEPTH: usize = 3;
pub const DEFAULT_AUX_SIZE: usize = 3;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteLayerSpec {
    pub factor_sizes: Vec<usize>,
    pub modality_sizes: Vec<usize>,
    pub horizon: usize,
    #[serde(default)]
    pub generalised_depth: usize,
    /// Which base factors receive generalised orders. Empty means all of them.
    #[serde(default)]
    pub generalised: Vec<bool>,
    /// Cardinality of the order-k auxiliary state (index k−1). Missing entries
    /// default to [`DEFAULT_AUX_SIZE`].
    #[serde(default)]
    pub aux_sizes: Vec<usize>,
    #[serde(default)]
    pub controllable: Vec<bool>,
    /// Action cardinality per base factor; missing entries default to the
    /// size of the controlled state.
    #[serde(default)]
    pub control_sizes: Vec<usize>,
    /// Whether auxiliary (generalised) states also condition the likelihood.
    #[serde(default)]
    pub aux_observed: bool,
}

impl DiscreteLayerSpec {
    pub fn new(factor_sizes: Vec<usize>, modality_sizes: Vec<usize>, horizon: usize) -> Self {
        Self {
            factor_sizes,
            modality_sizes,
            horizon,
            generalised_depth: 0,
            generalised: Vec::new(),
            aux_sizes: Vec::new(),
            controllable: Vec::new(),
            control_sizes: Vec::new(),
            aux_observed: false,
        }
    }

    pub fn with_generalised(mut self, depth: usize, flags: Vec<bool>, aux_sizes: Vec<usize>) -> Self {
        self.generalised_depth = depth;
        self.generalised = flags;
        self.aux_sizes = aux_sizes;
        self
    }

    pub fn with_control(mut self, factor: usize, size: usize) -> Self {
        let n = self.factor_sizes.len();
        self.controllable.resize(n, false);
        self.control_sizes.resize(n, 0);
        self.controllable[factor] = true;
        self.control_sizes[factor] = size;
        self
    }

    pub fn num_base_factors(&self) -> usize {
        self.factor_sizes.len()
    }

    pub fn is_generalised(&self, factor: usize) -> bool {
        self.generalised_depth > 0 && self.generalised.get(factor).copied().unwrap_or(self.generalised.is_empty())
    }

    pub fn is_controllable(&self, factor: usize) -> bool {
        self.controllable.get(factor).copied().unwrap_or(false)
    }

    pub fn aux_size(&self, order: usize) -> usize {
        self.aux_sizes
            .get(order - 1)
            .copied()
            .filter(|&s| s > 0)
            .unwrap_or(DEFAULT_AUX_SIZE)
    }

    fn highest_size(&self, factor: usize) -> usize {
        if self.is_generalised(factor) {
            self.aux_size(self.generalised_depth)
        } else {
            self.factor_sizes[factor]
        }
    }

    pub fn control_size(&self, factor: usize) -> usize {
        self.control_sizes
            .get(factor)
            .copied()
            .filter(|&s| s > 0)
            .unwrap_or_else(|| self.highest_size(factor))
    }

    /// Checks the class bounds; returns human-readable problems.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.horizon == 0 {
            out.push("horizon must be at least 1".to_string());
        }
        if self.factor_sizes.is_empty() {
            out.push("at least one latent factor is required".to_string());
        }
        for (f, &s) in self.factor_sizes.iter().enumerate() {
            if s < 2 {
                out.push(format!("factor {f} has cardinality {s} < 2"));
            }
        }
        for (m, &s) in self.modality_sizes.iter().enumerate() {
            if s < 1 {
                out.push(format!("modality {m} has cardinality 0"));
            }
        }
        if self.generalised_depth > MAX_GENERALISED_DEPTH {
            out.push(format!(
                "generalised depth {} exceeds {MAX_GENERALISED_DEPTH}",
                self.generalised_depth
            ));
        }
        let n = self.factor_sizes.len();
        if !self.generalised.is_empty() && self.generalised.len() != n {
            out.push("generalised flags must match the number of factors".to_string());
        }
        if self.controllable.len() > n {
            out.push("more controllable flags than factors".to_string());
        }
        for k in 1..=self.generalised_depth.min(MAX_GENERALISED_DEPTH) {
            if self.aux_size(k) < 2 {
                out.push(format!("auxiliary order {k} has cardinality < 2"));
            }
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        if self.generalised_depth > MAX_GENERALISED_DEPTH {
            return Err(Error::DepthExceeded {
                depth: self.generalised_depth,
                max: MAX_GENERALISED_DEPTH,
            });
        }
        match self.problems().into_iter().next() {
            Some(p) => Err(Error::InvalidModel(p)),
            None => Ok(()),
        }
    }
}

/// What indexes the third axis of a factor's transition tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulator {
    Fixed,
    Action { control: usize, size: usize },
    Factor(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedFactor {
    pub size: usize,
    pub base: usize,
    pub order: usize,
    pub modulator: Modulator,
}

/// The factor list after generalised expansion: base factors first, then the
/// auxiliary orders of each flagged base factor in turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorGraph {
    pub factors: Vec<ExpandedFactor>,
    pub control_sizes: Vec<usize>,
    /// Expanded factor indices that condition the likelihood, in axis order.
    pub observed: Vec<usize>,
}

impl FactorGraph {
    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn num_controls(&self) -> usize {
        self.control_sizes.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.size).collect()
    }

    pub fn observed_sizes(&self) -> Vec<usize> {
        self.observed.iter().map(|&i| self.factors[i].size).collect()
    }

    pub fn modulator_size(&self, factor: usize) -> usize {
        match self.factors[factor].modulator {
            Modulator::Fixed => 1,
            Modulator::Action { size, .. } => size,
            Modulator::Factor(g) => self.factors[g].size,
        }
    }

    /// Factors whose transitions are modulated by `factor`.
    pub fn modulated_by(&self, factor: usize) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&f| self.factors[f].modulator == Modulator::Factor(factor))
            .collect()
    }

    pub fn joint_size(&self) -> usize {
        self.factors.iter().map(|f| f.size).product()
    }
}

pub fn apply_generalised_structure(spec: &DiscreteLayerSpec) -> Result<FactorGraph> {
    spec.check()?;
    let n = spec.num_base_factors();
    let g = spec.generalised_depth;
    let mut factors: Vec<ExpandedFactor> = spec
        .factor_sizes
        .iter()
        .enumerate()
        .map(|(f, &size)| ExpandedFactor {
            size,
            base: f,
            order: 0,
            modulator: Modulator::Fixed,
        })
        .collect();
    // chain[f] lists expanded indices of base factor f by order.
    let mut chains: Vec<Vec<usize>> = (0..n).map(|f| vec![f]).collect();
    for (f, chain) in chains.iter_mut().enumerate() {
        if spec.is_generalised(f) {
            for order in 1..=g {
                chain.push(factors.len());
                factors.push(ExpandedFactor {
                    size: spec.aux_size(order),
                    base: f,
                    order,
                    modulator: Modulator::Fixed,
                });
            }
        }
    }
    let mut control_sizes = Vec::new();
    for (f, chain) in chains.iter().enumerate() {
        for w in chain.windows(2) {
            factors[w[0]].modulator = Modulator::Factor(w[1]);
        }
        if spec.is_controllable(f) {
            let top = *chain.last().expect("chain has at least the base factor");
            let size = spec.control_size(f);
            factors[top].modulator = Modulator::Action {
                control: control_sizes.len(),
                size,
            };
            control_sizes.push(size);
        }
    }
    let observed = if spec.aux_observed {
        (0..factors.len()).collect()
    } else {
        (0..n).collect()
    };
    Ok(FactorGraph {
        factors,
        control_sizes,
        observed,
    })
}

/// Mixed-radix iteration over joint configurations.
pub(crate) fn joint_configs(sizes: &[usize]) -> impl Iterator<Item = Vec<usize>> + '_ {
    let total: usize = sizes.iter().product();
    (0..total).map(move |mut flat| {
        let mut idx = vec![0; sizes.len()];
        for k in (0..sizes.len()).rev() {
            idx[k] = flat % sizes[k];
            flat /= sizes[k];
        }
        idx
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteLayerModel {
    pub spec: DiscreteLayerSpec,
    pub likelihood: Vec<ArrayD<f64>>,
    pub transitions: Vec<ArrayD<f64>>,
    pub initial: Vec<Vec<f64>>,
    pub preferences: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub tensor: String,
    pub index: Vec<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{:?}: {}", self.tensor, self.index, self.message)
    }
}

impl DiscreteLayerModel {
    pub fn graph(&self) -> Result<FactorGraph> {
        apply_generalised_structure(&self.spec)
    }

    pub fn likelihood_shape(graph: &FactorGraph, outcomes: usize) -> Vec<usize> {
        let mut shape = vec![outcomes];
        shape.extend(graph.observed_sizes());
        shape
    }

    pub fn transition_shape(graph: &FactorGraph, factor: usize) -> Vec<usize> {
        let s = graph.factors[factor].size;
        vec![s, s, graph.modulator_size(factor)]
    }

    /// Uniform likelihoods, uniform transitions, uniform priors, flat preferences.
    pub fn uniform(spec: DiscreteLayerSpec) -> Result<Self> {
        let graph = apply_generalised_structure(&spec)?;
        let likelihood = spec
            .modality_sizes
            .iter()
            .map(|&n| ArrayD::from_elem(IxDyn(&Self::likelihood_shape(&graph, n)), 1.0 / n as f64))
            .collect();
        let transitions = (0..graph.num_factors())
            .map(|f| {
                let shape = Self::transition_shape(&graph, f);
                ArrayD::from_elem(IxDyn(&shape), 1.0 / shape[0] as f64)
            })
            .collect();
        let initial = graph
            .factors
            .iter()
            .map(|f| vec![1.0 / f.size as f64; f.size])
            .collect();
        let preferences = spec
            .modality_sizes
            .iter()
            .map(|&n| Array2::zeros((spec.horizon, n)))
            .collect();
        Ok(Self {
            spec,
            likelihood,
            transitions,
            initial,
            preferences,
        })
    }

    /// Every categorical slice drawn from a symmetric Dirichlet(`concentration`).
    pub fn random<R: Rng>(spec: DiscreteLayerSpec, rng: &mut R, concentration: f64) -> Result<Self> {
        let mut model = Self::uniform(spec)?;
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::InvalidValue(format!("concentration: {e}")))?;
        let mut draw = |t: &mut ArrayD<f64>| {
            for mut lane in t.lanes_mut(Axis(0)) {
                lane.mapv_inplace(|_| gamma.sample(rng).max(1e-12));
                let s = lane.sum();
                lane.mapv_inplace(|x| x / s);
            }
        };
        for a in &mut model.likelihood {
            draw(a);
        }
        for b in &mut model.transitions {
            draw(b);
        }
        for d in &mut model.initial {
            let mut t = ndarray::Array1::from(d.clone()).into_dyn();
            draw(&mut t);
            *d = t.into_raw_vec_and_offset().0;
        }
        Ok(model)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    pub fn initial_categorical(&self, factor: usize) -> Result<Categorical> {
        Categorical::new(self.initial[factor].clone())
    }

    pub fn to_json_value(&self) -> Value {
        json!({
            "format_version": FORMAT_VERSION,
            "spec": serde_json::to_value(&self.spec).expect("spec serialises"),
            "likelihood_A": self.likelihood.iter().map(tensor_json::to_value).collect::<Vec<_>>(),
            "transitions_B": self.transitions.iter().map(tensor_json::to_value).collect::<Vec<_>>(),
            "prior_D": self.initial,
            "preferences_C": self.preferences.iter()
                .map(|c| tensor_json::to_value(&c.clone().into_dyn()))
                .collect::<Vec<_>>(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("model serialises")
    }

    pub fn from_json_value(v: &Value) -> Result<Self> {
        let version = v["format_version"].as_u64();
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Serialisation(format!(
                "unsupported format_version {:?}",
                v["format_version"]
            )));
        }
        let spec: DiscreteLayerSpec = serde_json::from_value(v["spec"].clone())?;
        let tensors = |key: &str| -> Result<Vec<ArrayD<f64>>> {
            v[key]
                .as_array()
                .ok_or_else(|| Error::Serialisation(format!("missing `{key}`")))?
                .iter()
                .map(tensor_json::from_value)
                .collect()
        };
        let likelihood = tensors("likelihood_A")?;
        let transitions = tensors("transitions_B")?;
        let initial: Vec<Vec<f64>> = serde_json::from_value(v["prior_D"].clone())?;
        let preferences = tensors("preferences_C")?
            .into_iter()
            .map(|c| {
                c.into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| Error::Serialisation(format!("preferences_C: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            likelihood,
            transitions,
            initial,
            preferences,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_json_value(&serde_json::from_str(s)?)
    }
}

fn check_tensor(name: String, t: &ArrayD<f64>, expected: &[usize], out: &mut Vec<Violation>) {
    if t.shape() != expected {
        out.push(Violation {
            tensor: name,
            index: vec![],
            message: format!("shape {:?}, expected {:?}", t.shape(), expected),
        });
        return;
    }
    for (idx, &x) in t.indexed_iter() {
        if !x.is_finite() || x < 0.0 {
            out.push(Violation {
                tensor: name.clone(),
                index: idx.slice().to_vec(),
                message: format!("entry {x} is negative or non-finite"),
            });
        }
    }
    let column_shape = &expected[1..];
    for (col, lane) in t.lanes(Axis(0)).into_iter().enumerate() {
        let s = lane.sum();
        if (s - 1.0).abs() > PROB_TOL {
            let index = unravel(col, column_shape);
            out.push(Violation {
                tensor: name.clone(),
                index,
                message: format!("column sums to {s}"),
            });
        }
    }
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for k in (0..shape.len()).rev() {
        idx[k] = flat % shape[k];
        flat /= shape[k];
    }
    idx
}

/// Returns every invariant violation; an empty list means the model is valid.
pub fn validate(model: &DiscreteLayerModel) -> Vec<Violation> {
    let mut out = Vec::new();
    for p in model.spec.problems() {
        out.push(Violation {
            tensor: "spec".into(),
            index: vec![],
            message: p,
        });
    }
    let graph = match apply_generalised_structure(&model.spec) {
        Ok(g) => g,
        Err(_) => return out,
    };
    let spec = &model.spec;
    if model.likelihood.len() != spec.modality_sizes.len() {
        out.push(Violation {
            tensor: "A".into(),
            index: vec![],
            message: format!(
                "{} likelihood tensors for {} modalities",
                model.likelihood.len(),
                spec.modality_sizes.len()
            ),
        });
    }
    for (m, (a, &n)) in model.likelihood.iter().zip(&spec.modality_sizes).enumerate() {
        let shape = DiscreteLayerModel::likelihood_shape(&graph, n);
        check_tensor(format!("A[{m}]"), a, &shape, &mut out);
    }
    if model.transitions.len() != graph.num_factors() {
        out.push(Violation {
            tensor: "B".into(),
            index: vec![],
            message: format!(
                "{} transition tensors for {} expanded factors",
                model.transitions.len(),
                graph.num_factors()
            ),
        });
    }
    for (f, b) in model.transitions.iter().enumerate().take(graph.num_factors()) {
        let shape = DiscreteLayerModel::transition_shape(&graph, f);
        check_tensor(format!("B[{f}]"), b, &shape, &mut out);
    }
    if model.initial.len() != graph.num_factors() {
        out.push(Violation {
            tensor: "D".into(),
            index: vec![],
            message: "prior count does not match expanded factors".into(),
        });
    }
    for (f, d) in model.initial.iter().enumerate().take(graph.num_factors()) {
        let t = ndarray::Array1::from(d.clone()).into_dyn();
        check_tensor(format!("D[{f}]"), &t, &[graph.factors[f].size], &mut out);
    }
    if model.preferences.len() != spec.modality_sizes.len() {
        out.push(Violation {
            tensor: "C".into(),
            index: vec![],
            message: "preference count does not match modalities".into(),
        });
    }
    for (m, (c, &n)) in model.preferences.iter().zip(&spec.modality_sizes).enumerate() {
        if c.dim() != (spec.horizon, n) {
            out.push(Violation {
                tensor: format!("C[{m}]"),
                index: vec![],
                message: format!("shape {:?}, expected [{}, {n}]", c.shape(), spec.horizon),
            });
        }
        for ((t, o), &x) in c.indexed_iter() {
            if !x.is_finite() {
                out.push(Violation {
                    tensor: format!("C[{m}]"),
                    index: vec![t, o],
                    message: "non-finite log-preference".into(),
                });
            }
        }
    }
    out
}

/// Checks an action sequence against the layer's controls.
pub(crate) fn check_actions(graph: &FactorGraph, horizon: usize, actions: &[Vec<usize>]) -> Result<()> {
    let expected = horizon.saturating_sub(1);
    if actions.len() != expected && !(graph.num_controls() == 0 && actions.is_empty()) {
        return Err(Error::LengthMismatch {
            what: "actions",
            expected,
            got: actions.len(),
        });
    }
    for step in actions {
        if step.len() != graph.num_controls() {
            return Err(Error::LengthMismatch {
                what: "controls per step",
                expected: graph.num_controls(),
                got: step.len(),
            });
        }
        for (&a, &size) in step.iter().zip(&graph.control_sizes) {
            if a >= size {
                return Err(Error::InvalidAction(a));
            }
        }
    }
    Ok(())
}

/// Index on the modulator axis of `factor`'s transition at time `t`.
pub(crate) fn modulator_index(
    graph: &FactorGraph,
    factor: usize,
    states: &[usize],
    actions: &[Vec<usize>],
    t: usize,
) -> usize {
    match graph.factors[factor].modulator {
        Modulator::Fixed => 0,
        Modulator::Action { control, .. } => actions.get(t).map(|a| a[control]).unwrap_or(0),
        Modulator::Factor(g) => states[g],
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `states[t][f]` over expanded factors.
    pub states: Vec<Vec<usize>>,
    /// `observations[t][m]`.
    pub observations: Vec<Vec<usize>>,
}

pub(crate) fn sample_index<R: Rng>(probs: impl IntoIterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Ancestral sampling: s₁ ~ D, s_{t+1} ~ B(·|s_t, a_t), o_t ~ A(·|s_t).
pub fn sample_trajectory(model: &DiscreteLayerModel, actions: &[Vec<usize>], seed: u64) -> Result<Trajectory> {
    let graph = model.graph()?;
    let horizon = model.spec.horizon;
    check_actions(&graph, horizon, actions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(horizon);
    let mut observations = Vec::with_capacity(horizon);
    let mut current: Vec<usize> = model
        .initial
        .iter()
        .map(|d| sample_index(d.iter().copied(), &mut rng))
        .collect();
    for t in 0..horizon {
        let obs: Vec<usize> = model
            .likelihood
            .iter()
            .map(|a| {
                let mut idx = vec![0usize];
                idx.extend(graph.observed.iter().map(|&f| current[f]));
                let n = a.shape()[0];
                sample_index(
                    (0..n).map(|o| {
                        idx[0] = o;
                        a[IxDyn(&idx)]
                    }),
                    &mut rng,
                )
            })
            .collect();
        observations.push(obs);
        states.push(current.clone());
        if t + 1 < horizon {
            let next: Vec<usize> = (0..graph.num_factors())
                .map(|f| {
                    let m = modulator_index(&graph, f, &current, actions, t);
                    let b = &model.transitions[f];
                    let s = current[f];
                    sample_index((0..b.shape()[0]).map(|n| b[[n, s, m]]), &mut rng)
                })
                .collect();
            current = next;
        }
    }
    Ok(Trajectory {
        states,
        observations,
    })
}

/// Dirichlet counts over every categorical map of a discrete layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletModel {
    pub spec: DiscreteLayerSpec,
    pub likelihood: Vec<DirichletCounts>,
    pub transitions: Vec<DirichletCounts>,
    pub initial: Vec<DirichletCounts>,
}

impl DirichletModel {
    /// Every count equal to `concentration`.
    pub fn flat(spec: DiscreteLayerSpec, concentration: f64) -> Result<Self> {
        let template = DiscreteLayerModel::uniform(spec)?;
        Self::from_model(&template, 0.0, concentration)
    }

    /// Counts `scale · p + floor` from the probabilities of `model`.
    pub fn from_model(model: &DiscreteLayerModel, scale: f64, floor: f64) -> Result<Self> {
        let wrap = |t: &ArrayD<f64>| DirichletCounts::new(t.mapv(|p| scale * p + floor));
        Ok(Self {
            spec: model.spec.clone(),
            likelihood: model.likelihood.iter().map(wrap).collect::<Result<_>>()?,
            transitions: model.transitions.iter().map(wrap).collect::<Result<_>>()?,
            initial: model
                .initial
                .iter()
                .map(|d| wrap(&ndarray::Array1::from(d.clone()).into_dyn()))
                .collect::<Result<_>>()?,
        })
    }

    /// Model whose maps are the Dirichlet means, with the given preferences.
    pub fn mean_model(&self, preferences: &[Array2<f64>]) -> DiscreteLayerModel {
        DiscreteLayerModel {
            spec: self.spec.clone(),
            likelihood: self.likelihood.iter().map(|c| c.mean()).collect(),
            transitions: self.transitions.iter().map(|c| c.mean()).collect(),
            initial: self
                .initial
                .iter()
                .map(|c| c.mean().into_raw_vec_and_offset().0)
                .collect(),
            preferences: preferences.to_vec(),
        }
    }

    /// Σ KL(Dir(self) ‖ Dir(prior)) over all maps.
    pub fn kl_from(&self, prior: &DirichletModel) -> Result<f64> {
        let mut total = 0.0;
        for (q, p) in self.likelihood.iter().zip(&prior.likelihood) {
            total += q.kl_from(p)?;
        }
        for (q, p) in self.transitions.iter().zip(&prior.transitions) {
            total += q.kl_from(p)?;
        }
        for (q, p) in self.initial.iter().zip(&prior.initial) {
            total += q.kl_from(p)?;
        }
        Ok(total)
    }

    /// Number of free parameters (entries minus one per normalised slice).
    pub fn parameter_count(&self) -> usize {
        self.likelihood
            .iter()
            .chain(&self.transitions)
            .chain(&self.initial)
            .map(|c| {
                let n = c.shape()[0];
                (n - 1) * (c.counts().len() / n)
            })
            .sum()
    }

    pub fn total_count(&self) -> f64 {
        self.likelihood
            .iter()
            .chain(&self.transitions)
            .chain(&self.initial)
            .map(|c| c.counts().sum())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn two_state_model() -> DiscreteLayerModel {
        let spec = DiscreteLayerSpec::new(vec![2], vec![2], 3);
        let mut m = DiscreteLayerModel::uniform(spec).unwrap();
        m.likelihood[0] = arr2(&[[0.9, 0.2], [0.1, 0.8]]).into_dyn();
        m
    }

    #[test]
    fn validate_well_formed() {
        assert!(validate(&two_state_model()).is_empty());
    }

    #[test]
    fn validate_reports_bad_column() {
        let mut m = two_state_model();
        m.likelihood[0][[1, 1]] = 0.7; // column 1 sums to 0.9
        let v = validate(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].tensor, "A[0]");
        assert_eq!(v[0].index, vec![1]);
    }

    #[test]
    fn validate_reports_negative_entry() {
        let mut m = two_state_model();
        m.transitions[0][[0, 1, 0]] = -0.1;
        m.transitions[0][[1, 1, 0]] = 1.1;
        let v = validate(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].tensor, "B[0]");
        assert_eq!(v[0].index, vec![0, 1, 0]);
    }

    #[test]
    fn generalised_identity_and_expansion() {
        let spec = DiscreteLayerSpec::new(vec![4, 3], vec![4], 3);
        let g = apply_generalised_structure(&spec).unwrap();
        assert_eq!(g.sizes(), vec![4, 3]);
        assert!(g.factors.iter().all(|f| f.modulator == Modulator::Fixed));

        let spec = DiscreteLayerSpec::new(vec![4], vec![4], 3).with_generalised(1, vec![true], vec![3]);
        let g = apply_generalised_structure(&spec).unwrap();
        assert_eq!(g.sizes(), vec![4, 3]);
        assert_eq!(g.factors[0].modulator, Modulator::Factor(1));
        assert_eq!(g.factors[1].modulator, Modulator::Fixed);
        assert_eq!(g.factors[1].order, 1);

        let spec = DiscreteLayerSpec::new(vec![4], vec![4], 3).with_generalised(4, vec![true], vec![]);
        assert!(matches!(
            apply_generalised_structure(&spec),
            Err(Error::DepthExceeded { depth: 4, max: 3 })
        ));
    }

    #[test]
    fn controllable_top_order_takes_action() {
        let spec = DiscreteLayerSpec::new(vec![4, 2], vec![4], 3)
            .with_generalised(2, vec![true, false], vec![3, 3])
            .with_control(0, 3);
        let g = apply_generalised_structure(&spec).unwrap();
        assert_eq!(g.num_factors(), 4);
        assert_eq!(g.factors[0].modulator, Modulator::Factor(2));
        assert_eq!(g.factors[2].modulator, Modulator::Factor(3));
        assert_eq!(g.factors[3].modulator, Modulator::Action { control: 0, size: 3 });
        assert_eq!(g.factors[1].modulator, Modulator::Fixed);
    }

    #[test]
    fn factor_count_invariant() {
        for g in 0..=3 {
            for flags in [vec![true, false, true], vec![false, false, false], vec![true, true, true]] {
                let spec = DiscreteLayerSpec::new(vec![2, 3, 2], vec![2], 2)
                    .with_generalised(g, flags.clone(), vec![]);
                let graph = apply_generalised_structure(&spec).unwrap();
                let flagged = if g == 0 { 0 } else { flags.iter().filter(|&&x| x).count() };
                assert_eq!(graph.num_factors(), 3 + g * flagged);
            }
        }
    }

    /// Ring kinematics: position, velocity and acceleration all live on Z₅.
    fn ring_model(horizon: usize, start: [usize; 3]) -> DiscreteLayerModel {
        let n = 5;
        let spec = DiscreteLayerSpec::new(vec![n], vec![n], horizon).with_generalised(2, vec![true], vec![n, n]);
        let mut m = DiscreteLayerModel::uniform(spec).unwrap();
        m.likelihood[0] = ndarray::Array2::<f64>::eye(n).into_dyn();
        for f in 0..2 {
            let mut b = ArrayD::zeros(IxDyn(&[n, n, n]));
            for s in 0..n {
                for k in 0..n {
                    b[[(s + k) % n, s, k]] = 1.0;
                }
            }
            m.transitions[f] = b;
        }
        let mut b = ArrayD::zeros(IxDyn(&[n, n, 1]));
        for s in 0..n {
            b[[s, s, 0]] = 1.0;
        }
        m.transitions[2] = b;
        for (f, &s) in start.iter().enumerate() {
            m.initial[f] = Categorical::one_hot(n, s).into_vec();
        }
        m
    }

    #[test]
    fn second_order_chain_has_constant_second_differences() {
        for acc in 0..5 {
            let m = ring_model(12, [1, 3, acc]);
            assert!(validate(&m).is_empty());
            let traj = sample_trajectory(&m, &[], 7).unwrap();
            let pos: Vec<i64> = traj.observations.iter().map(|o| o[0] as i64).collect();
            for w in pos.windows(3) {
                let second = (w[2] - 2 * w[1] + w[0]).rem_euclid(5);
                assert_eq!(second, acc as i64);
            }
        }
    }

    #[test]
    fn deterministic_model_gives_unique_trajectory() {
        let spec = DiscreteLayerSpec::new(vec![3], vec![3], 4).with_control(0, 3);
        let mut m = DiscreteLayerModel::uniform(spec).unwrap();
        m.likelihood[0] = ndarray::Array2::<f64>::eye(3).into_dyn();
        let mut b = ArrayD::zeros(IxDyn(&[3, 3, 3]));
        for s in 0..3 {
            for a in 0..3 {
                b[[a, s, a]] = 1.0;
            }
        }
        m.transitions[0] = b;
        m.initial[0] = vec![0.0, 1.0, 0.0];
        let traj = sample_trajectory(&m, &[vec![2], vec![0], vec![1]], 1).unwrap();
        assert_eq!(traj.observations, vec![vec![1], vec![2], vec![0], vec![1]]);
        assert!(matches!(
            sample_trajectory(&m, &[vec![2]], 1),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn identity_transitions_hold_state() {
        let spec = DiscreteLayerSpec::new(vec![4], vec![2], 6);
        let mut m = DiscreteLayerModel::uniform(spec).unwrap();
        let mut b = ArrayD::zeros(IxDyn(&[4, 4, 1]));
        for s in 0..4 {
            b[[s, s, 0]] = 1.0;
        }
        m.transitions[0] = b;
        for seed in 0..20 {
            let traj = sample_trajectory(&m, &[], seed).unwrap();
            assert!(traj.states.iter().all(|s| s == &traj.states[0]));
        }
    }

    #[test]
    fn uniform_likelihood_gives_uniform_outcomes() {
        let spec = DiscreteLayerSpec::new(vec![2], vec![4], 1);
        let m = DiscreteLayerModel::uniform(spec).unwrap();
        let n = 10_000;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            counts[sample_trajectory(&m, &[], seed as u64).unwrap().observations[0][0]] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampling_recovers_initial_prior() {
        let spec = DiscreteLayerSpec::new(vec![3], vec![2], 2);
        let mut m = DiscreteLayerModel::uniform(spec).unwrap();
        m.initial[0] = vec![0.2, 0.5, 0.3];
        let n = 10_000;
        let mut counts = [0usize; 3];
        for seed in 0..n {
            counts[sample_trajectory(&m, &[], seed as u64).unwrap().states[0][0]] += 1;
        }
        for (c, p) in counts.iter().zip(&m.initial[0]) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn seeded_sampling_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = DiscreteLayerSpec::new(vec![3, 2], vec![3], 5);
        let m = DiscreteLayerModel::random(spec, &mut rng, 1.0).unwrap();
        assert_eq!(sample_trajectory(&m, &[], 11).unwrap(), sample_trajectory(&m, &[], 11).unwrap());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = DiscreteLayerSpec::new(vec![3, 2], vec![3, 2], 3)
            .with_generalised(1, vec![true, false], vec![2])
            .with_control(1, 2);
        let mut m = DiscreteLayerModel::random(spec, &mut rng, 0.7).unwrap();
        m.preferences[0][[1, 2]] = -1.0 / 3.0;
        let text = m.to_json();
        assert!(text.contains("\"format_version\": 1"));
        let back = DiscreteLayerModel::from_json(&text).unwrap();
        assert_eq!(back, m);
    }
}
