//! Expected free energy over open-loop policies and action selection.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beliefs::{dirichlet_increment_kl, entropy_of, softmax, softmax_unchecked, Categorical};
use crate::discrete::{apply_generalised_structure, joint_configs, DirichletModel, DiscreteLayerModel, DiscreteLayerSpec, FactorGraph, Modulator};
use crate::error::{Error, Result};
use crate::inference::StatePosterior;

pub const MAX_POLICIES: usize = 4096;
/// Largest joint state space rolled forward exactly.
pub const MAX_ROLLOUT_STATES: usize = 10_000;
pub const DEFAULT_PRECISION: f64 = 16.0;

/// Open-loop action sequence, `actions[step][control]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Policy {
    pub actions: Vec<Vec<usize>>,
}

impl Policy {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn first_action(&self) -> &[usize] {
        &self.actions[0]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EfeBreakdown {
    pub risk: f64,
    pub ambiguity: f64,
    pub novelty: f64,
    pub total: f64,
}

impl EfeBreakdown {
    fn new(risk: f64, ambiguity: f64, novelty: f64) -> Self {
        Self {
            risk,
            ambiguity,
            novelty,
            total: risk + ambiguity - novelty,
        }
    }
}

/// All policies of length `horizon`, lexicographic in (step, control).
pub fn enumerate_policies(spec: &DiscreteLayerSpec, horizon: usize) -> Result<Vec<Policy>> {
    if horizon == 0 {
        return Err(Error::InvalidValue("policy horizon must be at least 1".into()));
    }
    let graph = apply_generalised_structure(spec)?;
    let controls = &graph.control_sizes;
    let per_step: f64 = controls.iter().map(|&c| c as f64).product();
    let count = per_step.powi(horizon as i32);
    if count > MAX_POLICIES as f64 {
        return Err(Error::PolicySpaceTooLarge {
            count,
            max: MAX_POLICIES,
        });
    }
    let flat_sizes: Vec<usize> = (0..horizon).flat_map(|_| controls.iter().copied()).collect();
    Ok(joint_configs(&flat_sizes)
        .map(|flat| Policy {
            actions: (0..horizon)
                .map(|h| flat[h * controls.len()..(h + 1) * controls.len()].to_vec())
                .collect(),
        })
        .collect())
}

/// Parameters a rollout predicts with, plus counts when novelty is scored.
struct Rollout<'a> {
    graph: FactorGraph,
    likelihood: Vec<ArrayD<f64>>,
    transitions: Vec<ArrayD<f64>>,
    dir: Option<&'a DirichletModel>,
    configs: Vec<Vec<usize>>,
    observed_sizes: Vec<usize>,
    /// Observed-joint index of each joint configuration.
    observed_index: Vec<usize>,
}

impl<'a> Rollout<'a> {
    fn new(model: &DiscreteLayerModel, dir: Option<&'a DirichletModel>) -> Result<Self> {
        let graph = model.graph()?;
        let sizes = graph.sizes();
        let joint: usize = sizes.iter().product();
        if joint > MAX_ROLLOUT_STATES {
            return Err(Error::TooLarge {
                size: joint as f64,
                max: MAX_ROLLOUT_STATES as f64,
            });
        }
        let (likelihood, transitions) = match dir {
            Some(d) => {
                if d.spec != model.spec {
                    return Err(Error::ShapeMismatch("Dirichlet model and layer model differ in spec".into()));
                }
                (
                    d.likelihood.iter().map(|c| c.mean()).collect(),
                    d.transitions.iter().map(|c| c.mean()).collect(),
                )
            }
            None => (model.likelihood.clone(), model.transitions.clone()),
        };
        let configs: Vec<Vec<usize>> = joint_configs(&sizes).collect();
        let observed_sizes = graph.observed_sizes();
        let observed_index = configs
            .iter()
            .map(|c| {
                graph
                    .observed
                    .iter()
                    .zip(&observed_sizes)
                    .fold(0, |acc, (&f, &n)| acc * n + c[f])
            })
            .collect();
        Ok(Self {
            graph,
            likelihood,
            transitions,
            dir,
            configs,
            observed_sizes,
            observed_index,
        })
    }

    /// Joint distribution at time `now` implied by the block posterior.
    fn initial_joint(&self, posterior: &StatePosterior, now: usize) -> Vec<f64> {
        let mut q = vec![1.0; self.configs.len()];
        for block in &posterior.blocks {
            let probs = &block.marginals[now];
            for (j, cfg) in self.configs.iter().enumerate() {
                let c = block
                    .members
                    .iter()
                    .zip(&block.sizes)
                    .fold(0, |acc, (&f, &n)| acc * n + cfg[f]);
                q[j] *= probs[c];
            }
        }
        q
    }

    fn modulator(&self, f: usize, cfg: &[usize], step: &[usize]) -> usize {
        match self.graph.factors[f].modulator {
            Modulator::Fixed => 0,
            Modulator::Action { control, .. } => step[control],
            Modulator::Factor(g) => cfg[g],
        }
    }

    fn step(&self, q: &[f64], action: &[usize]) -> Vec<f64> {
        let n = self.configs.len();
        let mut next = vec![0.0; n];
        for (j, cfg) in self.configs.iter().enumerate() {
            if q[j] == 0.0 {
                continue;
            }
            let mods: Vec<usize> = (0..self.graph.num_factors()).map(|f| self.modulator(f, cfg, action)).collect();
            for (j2, cfg2) in self.configs.iter().enumerate() {
                let mut p = q[j];
                for f in 0..self.graph.num_factors() {
                    p *= self.transitions[f][[cfg2[f], cfg[f], mods[f]]];
                    if p == 0.0 {
                        break;
                    }
                }
                next[j2] += p;
            }
        }
        next
    }

    fn observed_marginal(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.observed_sizes.iter().product()];
        for (j, &p) in q.iter().enumerate() {
            out[self.observed_index[j]] += p;
        }
        out
    }

    /// Risk, ambiguity and A-novelty of the outcomes at one future time.
    fn outcome_terms(&self, q: &[f64], preferences: &[Array2<f64>], t: usize) -> (f64, f64, f64) {
        let q_obs = self.observed_marginal(q);
        let obs_configs: Vec<Vec<usize>> = joint_configs(&self.observed_sizes).collect();
        let (mut risk, mut ambiguity, mut novelty) = (0.0, 0.0, 0.0);
        for (m, a) in self.likelihood.iter().enumerate() {
            let outcomes = a.shape()[0];
            let mut predicted = vec![0.0; outcomes];
            for (k, cfg) in obs_configs.iter().enumerate() {
                if q_obs[k] == 0.0 {
                    continue;
                }
                let lane: Vec<f64> = (0..outcomes).map(|o| a[IxDyn(&index(o, cfg))]).collect();
                for (o, p) in lane.iter().enumerate() {
                    predicted[o] += q_obs[k] * p;
                }
                ambiguity += q_obs[k] * entropy_of(&lane);
                if let Some(dir) = self.dir {
                    let counts = dir.likelihood[m].counts();
                    let alpha: Vec<f64> = (0..outcomes).map(|o| counts[IxDyn(&index(o, cfg))]).collect();
                    novelty += q_obs[k]
                        * lane
                            .iter()
                            .enumerate()
                            .map(|(o, p)| p * dirichlet_increment_kl(&alpha, o))
                            .sum::<f64>();
                }
            }
            let prefs = softmax_unchecked(&preferences[m].row(t).to_vec(), 1.0);
            risk += predicted
                .iter()
                .zip(&prefs)
                .filter(|(&p, _)| p > 0.0)
                .map(|(p, c)| p * (p / c).ln())
                .sum::<f64>();
        }
        (risk.max(0.0), ambiguity, novelty)
    }

    /// Information gain about B from the transition out of joint `q`.
    fn transition_novelty(&self, q: &[f64], action: &[usize]) -> f64 {
        let Some(dir) = self.dir else { return 0.0 };
        let mut total = 0.0;
        for f in 0..self.graph.num_factors() {
            let size = self.graph.factors[f].size;
            let mut q_sm = Array2::<f64>::zeros((size, self.graph.modulator_size(f)));
            for (j, cfg) in self.configs.iter().enumerate() {
                q_sm[[cfg[f], self.modulator(f, cfg, action)]] += q[j];
            }
            let counts = dir.transitions[f].counts();
            let mean = &self.transitions[f];
            for ((s, m), &p) in q_sm.indexed_iter() {
                if p == 0.0 {
                    continue;
                }
                let alpha: Vec<f64> = (0..size).map(|s2| counts[[s2, s, m]]).collect();
                total += p * (0..size).map(|s2| mean[[s2, s, m]] * dirichlet_increment_kl(&alpha, s2)).sum::<f64>();
            }
        }
        total
    }
}

fn index(outcome: usize, cfg: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(cfg.len() + 1);
    idx.push(outcome);
    idx.extend_from_slice(cfg);
    idx
}

fn check_preferences(spec: &DiscreteLayerSpec, preferences: &[Array2<f64>]) -> Result<()> {
    if preferences.len() != spec.modality_sizes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} preference tables for {} modalities",
            preferences.len(),
            spec.modality_sizes.len()
        )));
    }
    for (m, c) in preferences.iter().enumerate() {
        if c.shape() != [spec.horizon, spec.modality_sizes[m]] {
            return Err(Error::ShapeMismatch(format!("preferences for modality {m} have shape {:?}", c.shape())));
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
    }
    Ok(())
}

/// EFE of `policy` applied from time `now`, summed over the policy's steps.
/// With `dir` given the rollout uses the Dirichlet means and scores novelty;
/// otherwise the model's maps are taken as known and novelty is zero.
pub fn expected_free_energy(
    model: &DiscreteLayerModel,
    dir: Option<&DirichletModel>,
    current: &StatePosterior,
    now: usize,
    policy: &Policy,
    preferences: &[Array2<f64>],
) -> Result<EfeBreakdown> {
    let rollout = Rollout::new(model, dir)?;
    efe_with(&rollout, current, now, policy, preferences, &model.spec)
}

fn efe_with(
    rollout: &Rollout<'_>,
    current: &StatePosterior,
    now: usize,
    policy: &Policy,
    preferences: &[Array2<f64>],
    spec: &DiscreteLayerSpec,
) -> Result<EfeBreakdown> {
    let reach = now + policy.horizon();
    if policy.horizon() == 0 {
        return Err(Error::InvalidValue("empty policy".into()));
    }
    if reach >= spec.horizon {
        return Err(Error::HorizonExceeded {
            reach,
            horizon: spec.horizon,
        });
    }
    if current.horizon() <= now || current.marginals.len() != rollout.graph.num_factors() {
        return Err(Error::ShapeMismatch("current posterior does not cover the present time".into()));
    }
    check_preferences(spec, preferences)?;
    for step in &policy.actions {
        if step.len() != rollout.graph.num_controls() {
            return Err(Error::LengthMismatch {
                what: "controls per step",
                expected: rollout.graph.num_controls(),
                got: step.len(),
            });
        }
        for (&a, &n) in step.iter().zip(&rollout.graph.control_sizes) {
            if a >= n {
                return Err(Error::InvalidAction(a));
            }
        }
    }
    let mut q = rollout.initial_joint(current, now);
    let (mut risk, mut ambiguity, mut novelty) = (0.0, 0.0, 0.0);
    for (h, action) in policy.actions.iter().enumerate() {
        novelty += rollout.transition_novelty(&q, action);
        q = rollout.step(&q, action);
        let (r, a, n) = rollout.outcome_terms(&q, preferences, now + h + 1);
        risk += r;
        ambiguity += a;
        novelty += n;
    }
    Ok(EfeBreakdown::new(risk, ambiguity, novelty))
}

/// softmax(−γ · totals).
pub fn policy_posterior(efes: &[f64], precision: f64) -> Result<Categorical> {
    if efes.iter().any(|x| !x.is_finite()) || !precision.is_finite() {
        return Err(Error::NonFinite);
    }
    if precision <= 0.0 {
        return Err(Error::InvalidValue(format!("precision {precision}")));
    }
    let neg: Vec<f64> = efes.iter().map(|g| -g).collect();
    softmax(&neg, precision)
}

/// First-step action with the most posterior mass; ties go to the
/// lexicographically lowest action.
pub fn select_action(policies: &[Policy], posterior: &Categorical) -> Result<Vec<usize>> {
    if policies.len() != posterior.len() || policies.is_empty() {
        return Err(Error::LengthMismatch {
            what: "policies",
            expected: posterior.len(),
            got: policies.len(),
        });
    }
    let mut firsts: Vec<(&[usize], f64)> = Vec::new();
    for (policy, &p) in policies.iter().zip(posterior.probs()) {
        match firsts.iter_mut().find(|(a, _)| *a == policy.first_action()) {
            Some(entry) => entry.1 += p,
            None => firsts.push((policy.first_action(), p)),
        }
    }
    firsts.sort_by(|a, b| a.0.cmp(b.0));
    let mut best = 0;
    for (i, (_, mass)) in firsts.iter().enumerate() {
        if *mass > firsts[best].1 {
            best = i;
        }
    }
    Ok(firsts[best].0.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub policies: Vec<Policy>,
    pub efes: Vec<EfeBreakdown>,
    pub posterior: Vec<f64>,
    pub action: Vec<usize>,
}

/// Scores every policy of length `horizon` (in parallel, order preserved)
/// and picks the next action.
pub fn plan(
    model: &DiscreteLayerModel,
    dir: Option<&DirichletModel>,
    current: &StatePosterior,
    now: usize,
    horizon: usize,
    precision: f64,
) -> Result<Plan> {
    let policies = enumerate_policies(&model.spec, horizon)?;
    let rollout = Rollout::new(model, dir)?;
    let efes = policies
        .par_iter()
        .map(|p| efe_with(&rollout, current, now, p, &model.preferences, &model.spec))
        .collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = efes.iter().map(|e| e.total).collect();
    let posterior = policy_posterior(&totals, precision)?;
    let action = select_action(&policies, &posterior)?;
    Ok(Plan {
        policies,
        efes,
        posterior: posterior.into_vec(),
        action,
    })
}

/// Predicted outcome distribution of modality `m` for a joint-state
/// distribution given as per-factor marginals at one time.
pub fn predicted_outcomes(model: &DiscreteLayerModel, marginals: &[Categorical], m: usize) -> Result<Categorical> {
    let graph = model.graph()?;
    if marginals.len() != graph.num_factors() {
        return Err(Error::ShapeMismatch("marginals per factor".into()));
    }
    let a = &model.likelihood[m];
    let mut out = a.clone();
    for (axis, &f) in graph.observed.iter().enumerate().rev() {
        let w = marginals[f].probs();
        out = out.map_axis(Axis(axis + 1), |lane| lane.iter().zip(w).map(|(x, p)| x * p).sum());
    }
    Categorical::new(out.iter().copied().collect())
}
