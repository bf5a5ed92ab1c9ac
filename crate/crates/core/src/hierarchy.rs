//! Layer stacks: discrete layers over discrete or continuous children.
//!
//! A link sends one parent outcome modality down as the child's initial
//! prior (a discrete factor's D, or the rsLDS initial regime). Each parent
//! time step spans one complete child window. Evidence travels up as the
//! child's free energy with its prior clamped to each parent value.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beliefs::Categorical;
use crate::discrete::{DirichletModel, DiscreteLayerModel};
use crate::error::{Error, Result};
use crate::inference::{infer_states_with, InferenceOptions, InferenceResult, LogParams, Obs};
use crate::planning::predicted_outcomes;
use crate::rslds::{filter, FilterResult, RsldsModel};

pub const MAX_STACK_DEPTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ChildTarget {
    /// Initial-state prior of a base factor of a discrete child.
    InitialState { factor: usize },
    /// Initial-regime prior of a continuous child.
    InitialRegime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub parent_modality: usize,
    pub child_target: ChildTarget,
    /// Child steps per parent step.
    pub temporal_ratio: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteLayer {
    pub model: DiscreteLayerModel,
    /// When present, inference uses E[ln θ] under these counts and
    /// predictions use their means.
    pub dirichlet: Option<DirichletModel>,
}

impl DiscreteLayer {
    pub fn fixed(model: DiscreteLayerModel) -> Self {
        Self { model, dirichlet: None }
    }

    pub fn learning(dirichlet: DirichletModel, preferences: &[ndarray::Array2<f64>]) -> Self {
        Self {
            model: dirichlet.mean_model(preferences),
            dirichlet: Some(dirichlet),
        }
    }

    pub fn log_params(&self) -> LogParams {
        match &self.dirichlet {
            Some(d) => LogParams::from_dirichlet(d),
            None => LogParams::from_model(&self.model),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Discrete(DiscreteLayer),
    Continuous(RsldsModel),
}

impl Layer {
    fn target_size(&self, target: ChildTarget) -> Result<usize> {
        match (self, target) {
            (Layer::Discrete(d), ChildTarget::InitialState { factor }) => d
                .model
                .spec
                .factor_sizes
                .get(factor)
                .copied()
                .ok_or_else(|| Error::InvalidModel(format!("child has no factor {factor}"))),
            (Layer::Continuous(m), ChildTarget::InitialRegime) => Ok(m.num_regimes()),
            _ => Err(Error::InvalidModel("link target does not match the child layer kind".into())),
        }
    }
}

/// Layers ordered top to bottom; `links[i]` joins layer `i` to layer `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
    pub links: Vec<LinkSpec>,
    pub options: InferenceOptions,
}

impl LayerStack {
    pub fn single(layer: Layer) -> Self {
        Self {
            layers: vec![layer],
            links: Vec::new(),
            options: InferenceOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n == 0 {
            return Err(Error::InvalidModel("empty stack".into()));
        }
        if n > MAX_STACK_DEPTH {
            return Err(Error::DepthExceeded {
                depth: n,
                max: MAX_STACK_DEPTH,
            });
        }
        if self.links.len() != n - 1 {
            return Err(Error::LengthMismatch {
                what: "links",
                expected: n - 1,
                got: self.links.len(),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Continuous(_)) && i + 1 != n {
                return Err(Error::InvalidModel(format!("continuous layer {i} is not at the bottom")));
            }
        }
        for (i, link) in self.links.iter().enumerate() {
            let Layer::Discrete(parent) = &self.layers[i] else {
                unreachable!("only the bottom layer may be continuous")
            };
            let outcomes = parent
                .model
                .spec
                .modality_sizes
                .get(link.parent_modality)
                .copied()
                .ok_or_else(|| Error::InvalidModel(format!("parent has no modality {}", link.parent_modality)).at_layer(i))?;
            let child = &self.layers[i + 1];
            let size = child.target_size(link.child_target).map_err(|e| e.at_layer(i + 1))?;
            if outcomes != size {
                return Err(Error::CardinalityMismatch { parent: outcomes, child: size }.at_layer(i + 1));
            }
            if link.temporal_ratio == 0 {
                return Err(Error::InvalidValue("temporal ratio must be at least 1".into()).at_layer(i + 1));
            }
            if let Layer::Discrete(d) = child {
                if d.model.spec.horizon != link.temporal_ratio {
                    return Err(Error::InvalidModel(format!(
                        "child horizon {} differs from temporal ratio {}",
                        d.model.spec.horizon, link.temporal_ratio
                    ))
                    .at_layer(i + 1));
                }
            }
        }
        Ok(())
    }

    /// Number of windows each layer runs: one at the top, then one per
    /// parent step.
    pub fn window_counts(&self) -> Vec<usize> {
        let mut counts = vec![1];
        for (i, link) in self.links.iter().enumerate() {
            let parent_steps = match &self.layers[i] {
                Layer::Discrete(d) => d.model.spec.horizon,
                Layer::Continuous(_) => link.temporal_ratio,
            };
            counts.push(counts[i] * parent_steps);
        }
        counts
    }
}

/// Child prior from the parent's predictive distribution over the linked
/// outcome.
pub fn descend_prior(parent_outcome: &Categorical, link: &LinkSpec, child: &Layer) -> Result<Categorical> {
    let size = child.target_size(link.child_target)?;
    if parent_outcome.len() != size {
        return Err(Error::CardinalityMismatch {
            parent: parent_outcome.len(),
            child: size,
        });
    }
    Ok(parent_outcome.clone())
}

/// Log-likelihood over parent values from the child's clamped free energies:
/// entry `v` is `−F_v`, i.e. the log of `exp(−F_v)`.
pub fn ascend_evidence(free_energies: &[Option<f64>]) -> Result<Vec<f64>> {
    free_energies
        .iter()
        .enumerate()
        .map(|(value, f)| match f {
            Some(f) if f.is_nan() => Err(Error::NonFinite),
            Some(f) => Ok(-f),
            None => Err(Error::MissingChildRun { value }),
        })
        .collect()
}

/// Observations at the bottom of a stack, one entry per bottom window.
#[derive(Clone, Debug, PartialEq)]
pub enum BottomObservations {
    Discrete(Vec<Vec<Vec<Obs>>>),
    Continuous(Vec<Vec<DVector<f64>>>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum WindowResult {
    Discrete(InferenceResult),
    Continuous(FilterResult),
}

impl WindowResult {
    pub fn free_energy(&self) -> f64 {
        match self {
            WindowResult::Discrete(r) => r.free_energy(),
            WindowResult::Continuous(r) => -r.log_evidence,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPosterior {
    /// Prior sent down from the parent, per window (None at the top).
    pub priors: Vec<Option<Categorical>>,
    pub windows: Vec<WindowResult>,
    /// Evidence received from the child, `[window][t]` log-likelihoods over
    /// the linked outcome (empty for the bottom layer).
    pub evidence: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackPosterior {
    pub layers: Vec<LayerPosterior>,
}

impl StackPosterior {
    /// Free energy of the top layer, which accounts for everything below
    /// through the ascended evidence.
    pub fn free_energy(&self) -> f64 {
        self.layers[0].windows.iter().map(WindowResult::free_energy).sum()
    }
}

/// Per-layer actions, `[layer][window][t][control]`; missing entries mean
/// no actions (valid for layers without controls).
pub type StackActions = Vec<Vec<Vec<Vec<usize>>>>;

struct Runner<'a> {
    stack: &'a LayerStack,
    bottom: &'a BottomObservations,
    actions: &'a [Vec<Vec<Vec<usize>>>],
}

impl Runner<'_> {
    fn actions(&self, layer: usize, window: usize) -> &[Vec<usize>] {
        self.actions
            .get(layer)
            .and_then(|l| l.get(window))
            .map(|a| a.as_slice())
            .unwrap_or(&[])
    }

    /// Observations of a discrete layer window: bottom data, or ascended
    /// evidence on the linked modality.
    fn discrete_obs(&self, layer: usize, window: usize, evidence: &[Vec<Vec<Vec<f64>>>]) -> Result<Vec<Vec<Obs>>> {
        let Layer::Discrete(d) = &self.stack.layers[layer] else {
            unreachable!()
        };
        if layer + 1 == self.stack.layers.len() {
            return match self.bottom {
                BottomObservations::Discrete(w) => Ok(w[window].clone()),
                BottomObservations::Continuous(_) => Err(Error::InvalidValue("bottom layer is discrete".into())),
            };
        }
        let link = &self.stack.links[layer];
        let modalities = d.model.spec.modality_sizes.len();
        Ok(evidence[layer][window]
            .iter()
            .map(|ll| {
                let mut row = vec![Obs::Missing; modalities];
                row[link.parent_modality] = Obs::LogLikelihood(ll.clone());
                row
            })
            .collect())
    }

    fn run_window(
        &self,
        layer: usize,
        window: usize,
        prior: Option<&Categorical>,
        evidence: &[Vec<Vec<Vec<f64>>>],
    ) -> Result<WindowResult> {
        let target = (layer > 0).then(|| self.stack.links[layer - 1].child_target);
        match &self.stack.layers[layer] {
            Layer::Discrete(d) => {
                let mut params = d.log_params();
                if let (Some(p), Some(ChildTarget::InitialState { factor })) = (prior, target) {
                    params.clamp_initial(factor, p);
                }
                let obs = self.discrete_obs(layer, window, evidence)?;
                infer_states_with(&d.model.spec, &params, &obs, self.actions(layer, window), &self.stack.options)
                    .map(WindowResult::Discrete)
            }
            Layer::Continuous(m) => {
                let BottomObservations::Continuous(w) = self.bottom else {
                    return Err(Error::InvalidValue("bottom layer is continuous".into()));
                };
                let ys = &w[window];
                if layer > 0 && ys.len() != self.stack.links[layer - 1].temporal_ratio {
                    return Err(Error::LengthMismatch {
                        what: "window length",
                        expected: self.stack.links[layer - 1].temporal_ratio,
                        got: ys.len(),
                    });
                }
                let model = match prior {
                    Some(p) => RsldsModel {
                        initial_regime: p.clone(),
                        ..m.clone()
                    },
                    None => m.clone(),
                };
                filter(&model, ys, None).map(WindowResult::Continuous)
            }
        }
    }
}

/// One bottom-up pass of clamped child runs, then one top-down pass of
/// priors and per-layer inference.
pub fn run_stack(stack: &LayerStack, bottom: &BottomObservations, actions: &[Vec<Vec<Vec<usize>>>]) -> Result<StackPosterior> {
    stack.validate()?;
    let depth = stack.layers.len();
    let counts = stack.window_counts();
    let supplied = match bottom {
        BottomObservations::Discrete(w) => w.len(),
        BottomObservations::Continuous(w) => w.len(),
    };
    if supplied != counts[depth - 1] {
        return Err(Error::LengthMismatch {
            what: "bottom windows",
            expected: counts[depth - 1],
            got: supplied,
        }
        .at_layer(depth - 1));
    }
    let runner = Runner { stack, bottom, actions };

    // Bottom-up: evidence[i][w][t] for every non-bottom layer.
    let mut evidence: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::new(); depth];
    for i in (0..depth - 1).rev() {
        let Layer::Discrete(parent) = &stack.layers[i] else {
            unreachable!()
        };
        let link = &stack.links[i];
        let values = parent.model.spec.modality_sizes[link.parent_modality];
        let steps = parent.model.spec.horizon;
        let mut layer_evidence = Vec::with_capacity(counts[i]);
        for w in 0..counts[i] {
            let mut rows = Vec::with_capacity(steps);
            for t in 0..steps {
                let child_window = w * steps + t;
                let runs: Vec<Option<f64>> = (0..values)
                    .into_par_iter()
                    .map(|v| {
                        let clamp = Categorical::one_hot(values, v);
                        runner
                            .run_window(i + 1, child_window, Some(&clamp), &evidence)
                            .map(|r| Some(r.free_energy()))
                    })
                    .collect::<Result<_>>()
                    .map_err(|e| e.at_layer(i + 1))?;
                rows.push(ascend_evidence(&runs).map_err(|e| e.at_layer(i + 1))?);
            }
            layer_evidence.push(rows);
        }
        evidence[i] = layer_evidence;
    }

    // Top-down.
    let mut layers: Vec<LayerPosterior> = Vec::with_capacity(depth);
    for i in 0..depth {
        let mut priors = Vec::with_capacity(counts[i]);
        let mut windows = Vec::with_capacity(counts[i]);
        for w in 0..counts[i] {
            let prior = if i == 0 {
                None
            } else {
                let Layer::Discrete(parent) = &stack.layers[i - 1] else {
                    unreachable!()
                };
                let steps = parent.model.spec.horizon;
                let (pw, t) = (w / steps, w % steps);
                let WindowResult::Discrete(result) = &layers[i - 1].windows[pw] else {
                    unreachable!()
                };
                let marginals: Vec<Categorical> = result.posterior.marginals.iter().map(|f| f[t].clone()).collect();
                let link = &stack.links[i - 1];
                let predictive =
                    predicted_outcomes(&parent.model, &marginals, link.parent_modality).map_err(|e| e.at_layer(i - 1))?;
                Some(descend_prior(&predictive, link, &stack.layers[i]).map_err(|e| e.at_layer(i))?)
            };
            windows.push(runner.run_window(i, w, prior.as_ref(), &evidence).map_err(|e| e.at_layer(i))?);
            priors.push(prior);
        }
        layers.push(LayerPosterior {
            priors,
            windows,
            evidence: std::mem::take(&mut evidence[i]),
        });
    }
    Ok(StackPosterior { layers })
}
