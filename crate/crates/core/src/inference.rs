//! Variational state inference and Dirichlet learning for one discrete layer.
//!
//! The approximate posterior factorises across blocks of latent factors. Each
//! block keeps a Markov-chain posterior over its joint state, refreshed
//! exactly by a forward-backward pass (forward messages through B, backward
//! messages through its transpose) given the expected log-potentials from the
//! other blocks. Every refresh is an exact coordinate minimisation, so the
//! free energy never increases across sweeps.

use ndarray::{Array2, Array3, ArrayD, Axis, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::beliefs::{entropy_of, log_sum_exp, safe_ln, Categorical};
use crate::discrete::{
    apply_generalised_structure, check_actions, joint_configs, DirichletModel, DiscreteLayerModel,
    DiscreteLayerSpec, FactorGraph, Modulator,
};
use crate::error::{Error, Result};

pub const CONVERGENCE_TOL: f64 = 1e-6;
pub const MAX_SWEEPS: usize = 64;
/// Cap on joint state configurations per time step for the exact oracle.
pub const ORACLE_LIMIT: f64 = 1e6;
/// Cap on enumerated state sequences for the exact oracle.
pub const SEQUENCE_LIMIT: f64 = 1e8;

/// One modality's observation at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Obs {
    Missing,
    Outcome(usize),
    /// Unnormalised log-likelihood over the outcome values (evidence passed up
    /// from a lower layer).
    LogLikelihood(Vec<f64>),
}

pub fn observations_from_indices(obs: &[Vec<usize>]) -> Vec<Vec<Obs>> {
    obs.iter()
        .map(|row| row.iter().map(|&o| Obs::Outcome(o)).collect())
        .collect()
}

/// How expanded factors are grouped into jointly-represented blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Family {
    /// One block per expanded factor.
    Factorised,
    /// One block per base factor together with its auxiliary orders.
    PerBaseFactor,
    /// All factors in a single block (exact within the layer).
    Joint,
    /// The finest of `Joint`, `PerBaseFactor`, `Factorised` whose blocks all
    /// have at most `max_block` joint states.
    Auto { max_block: usize },
}

impl Default for Family {
    fn default() -> Self {
        Family::Auto { max_block: 256 }
    }
}

impl Family {
    pub fn blocks(&self, graph: &FactorGraph) -> Vec<Vec<usize>> {
        let n = graph.num_factors();
        let factorised = || (0..n).map(|f| vec![f]).collect::<Vec<_>>();
        let per_base = || {
            let bases = graph.factors.iter().map(|f| f.base).max().map_or(0, |b| b + 1);
            (0..bases)
                .map(|b| (0..n).filter(|&f| graph.factors[f].base == b).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        match self {
            Family::Factorised => factorised(),
            Family::PerBaseFactor => per_base(),
            Family::Joint => vec![(0..n).collect()],
            Family::Auto { max_block } => {
                let fits = |blocks: &[Vec<usize>]| {
                    blocks.iter().all(|b| {
                        b.iter().map(|&f| graph.factors[f].size as f64).product::<f64>() <= *max_block as f64
                    })
                };
                let joint = vec![(0..n).collect::<Vec<_>>()];
                if fits(&joint) {
                    return joint;
                }
                let grouped = per_base();
                if fits(&grouped) {
                    return grouped;
                }
                factorised()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub family: Family,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            family: Family::default(),
            tolerance: CONVERGENCE_TOL,
            max_sweeps: MAX_SWEEPS,
        }
    }
}

/// Log-parameters used by inference: ln of the model's maps, or E[ln θ] under
/// a Dirichlet model when learning is on.
#[derive(Clone, Debug, PartialEq)]
pub struct LogParams {
    pub likelihood: Vec<ArrayD<f64>>,
    pub transitions: Vec<ArrayD<f64>>,
    pub initial: Vec<Vec<f64>>,
}

impl LogParams {
    pub fn from_model(model: &DiscreteLayerModel) -> Self {
        Self {
            likelihood: model.likelihood.iter().map(|a| a.mapv(safe_ln)).collect(),
            transitions: model.transitions.iter().map(|b| b.mapv(safe_ln)).collect(),
            initial: model
                .initial
                .iter()
                .map(|d| d.iter().map(|&p| safe_ln(p)).collect())
                .collect(),
        }
    }

    pub fn from_dirichlet(dir: &DirichletModel) -> Self {
        Self {
            likelihood: dir.likelihood.iter().map(|c| c.expected_log()).collect(),
            transitions: dir.transitions.iter().map(|c| c.expected_log()).collect(),
            initial: dir
                .initial
                .iter()
                .map(|c| c.expected_log().iter().copied().collect())
                .collect(),
        }
    }

    /// Replaces the initial-state log prior of one factor.
    pub fn clamp_initial(&mut self, factor: usize, prior: &Categorical) {
        self.initial[factor] = prior.probs().iter().map(|&p| safe_ln(p)).collect();
    }
}

/// Chain posterior over the joint state of a group of factors.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPosterior {
    pub members: Vec<usize>,
    /// Member sizes; block states enumerate member states with the last
    /// member varying fastest.
    pub sizes: Vec<usize>,
    /// `marginals[t][c]`
    pub marginals: Vec<Vec<f64>>,
    /// `pairwise[t][[c_t, c_{t+1}]]`
    pub pairwise: Vec<Array2<f64>>,
}

impl BlockPosterior {
    fn configs(&self) -> Vec<Vec<usize>> {
        joint_configs(&self.sizes).collect()
    }

    fn neg_entropy(&self) -> f64 {
        let mut h = entropy_of(&self.marginals[0]);
        for (t, pair) in self.pairwise.iter().enumerate() {
            h += entropy_of(pair.as_slice().expect("standard layout")) - entropy_of(&self.marginals[t]);
        }
        -h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatePosterior {
    pub blocks: Vec<BlockPosterior>,
    /// `marginals[f][t]`, per expanded factor.
    pub marginals: Vec<Vec<Categorical>>,
    /// `pairwise[f][t][[s_t, s_{t+1}]]`, per expanded factor.
    pub pairwise: Vec<Vec<Array2<f64>>>,
}

impl StatePosterior {
    /// Fully factorised posterior; pairwise joints are outer products.
    pub fn from_marginals(marginals: Vec<Vec<Categorical>>) -> Self {
        let pairwise = marginals
            .iter()
            .map(|chain| {
                chain
                    .windows(2)
                    .map(|w| outer(w[0].probs(), w[1].probs()))
                    .collect()
            })
            .collect();
        let blocks = marginals
            .iter()
            .zip(&pairwise)
            .enumerate()
            .map(|(f, (chain, pairs)): (usize, (&Vec<Categorical>, &Vec<Array2<f64>>))| BlockPosterior {
                members: vec![f],
                sizes: vec![chain.first().map_or(0, |c| c.len())],
                marginals: chain.iter().map(|c| c.probs().to_vec()).collect(),
                pairwise: pairs.clone(),
            })
            .collect();
        Self {
            blocks,
            marginals,
            pairwise,
        }
    }

    fn from_blocks(blocks: Vec<BlockPosterior>, num_factors: usize) -> Self {
        let mut marginals = vec![Vec::new(); num_factors];
        let mut pairwise = vec![Vec::new(); num_factors];
        for block in &blocks {
            let configs = block.configs();
            for (k, &f) in block.members.iter().enumerate() {
                let n = block.sizes[k];
                marginals[f] = block
                    .marginals
                    .iter()
                    .map(|q| {
                        let mut m = vec![0.0; n];
                        for (c, cfg) in configs.iter().enumerate() {
                            m[cfg[k]] += q[c];
                        }
                        let s: f64 = m.iter().sum();
                        Categorical::new(m.iter().map(|x| x / s).collect()).expect("normalised marginal")
                    })
                    .collect();
                let proj: Vec<usize> = configs.iter().map(|cfg| cfg[k]).collect();
                pairwise[f] = block.pairwise.iter().map(|pair| project_pair(pair, &proj, n)).collect();
            }
        }
        Self {
            blocks,
            marginals,
            pairwise,
        }
    }

    pub fn horizon(&self) -> usize {
        self.marginals.first().map(|c| c.len()).unwrap_or(0)
    }

    pub fn marginal(&self, factor: usize, t: usize) -> &Categorical {
        &self.marginals[factor][t]
    }

    /// Expected counts `[next, current, modulator]` of factor `f`'s
    /// transition from `t` to `t + 1`.
    pub fn transition_stats(&self, graph: &FactorGraph, f: usize, t: usize, actions: &[Vec<usize>]) -> Array3<f64> {
        let n = graph.factors[f].size;
        let mods = graph.modulator_size(f);
        let mut out = Array3::zeros((n, n, mods));
        match graph.factors[f].modulator {
            Modulator::Fixed => {
                for ((s, s2), &p) in self.pairwise[f][t].indexed_iter() {
                    out[[s2, s, 0]] += p;
                }
            }
            Modulator::Action { control, .. } => {
                let a = actions[t][control];
                for ((s, s2), &p) in self.pairwise[f][t].indexed_iter() {
                    out[[s2, s, a]] += p;
                }
            }
            Modulator::Factor(g) => {
                let shared = self
                    .blocks
                    .iter()
                    .find(|b| b.members.contains(&f) && b.members.contains(&g));
                match shared {
                    Some(block) => {
                        let kf = block.members.iter().position(|&x| x == f).expect("member");
                        let kg = block.members.iter().position(|&x| x == g).expect("member");
                        let configs = block.configs();
                        for ((c, c2), &p) in block.pairwise[t].indexed_iter() {
                            out[[configs[c2][kf], configs[c][kf], configs[c][kg]]] += p;
                        }
                    }
                    None => {
                        let qg = self.marginals[g][t].probs();
                        for ((s, s2), &p) in self.pairwise[f][t].indexed_iter() {
                            for (m, &w) in qg.iter().enumerate() {
                                out[[s2, s, m]] += p * w;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Joint weight of an observed-factor configuration at time `t`.
    fn observed_weight(&self, graph: &FactorGraph, t: usize) -> ArrayD<f64> {
        let sizes = graph.observed_sizes();
        let layout = BlockLayout::new(graph, &self.blocks);
        let tables: Vec<Vec<f64>> = (0..self.blocks.len())
            .map(|b| layout.observed_marginal(b, &self.blocks[b].marginals[t]))
            .collect();
        let mut out = ArrayD::zeros(IxDyn(&sizes));
        for (i, cfg) in joint_configs(&sizes).enumerate() {
            out.as_slice_mut().expect("standard layout")[i] =
                (0..self.blocks.len()).map(|b| tables[b][layout.observed_key(b, &cfg)]).product();
        }
        out
    }
}

fn outer(a: &[f64], b: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyTrace {
    pub values: Vec<f64>,
}

impl FreeEnergyTrace {
    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub posterior: StatePosterior,
    pub trace: FreeEnergyTrace,
    pub converged: bool,
}

impl InferenceResult {
    pub fn free_energy(&self) -> f64 {
        self.trace.last().unwrap_or(f64::NAN)
    }
}

/// Sums a block pairwise joint down to one member: `out[proj[c], proj[c2]]`.
fn project_pair(pair: &Array2<f64>, proj: &[usize], n: usize) -> Array2<f64> {
    let size = proj.len();
    let mut out = vec![0.0; n * n];
    for (c, row) in pair.outer_iter().enumerate() {
        let base = proj[c] * n;
        match row.as_slice() {
            Some(row) => {
                for (&p, &j) in row.iter().zip(proj) {
                    out[base + j] += p;
                }
            }
            None => {
                for c2 in 0..size {
                    out[base + proj[c2]] += row[c2];
                }
            }
        }
    }
    Array2::from_shape_vec((n, n), out).expect("n × n")
}

/// Index bookkeeping between blocks, factors and the observed-factor joint.
struct BlockLayout {
    /// `configs[b][c]` member states of block state `c`.
    configs: Vec<Vec<Vec<usize>>>,
    /// `(member index, observed position)` for each observed member.
    observed: Vec<Vec<(usize, usize)>>,
    observed_sizes: Vec<Vec<usize>>,
    /// `(block, member index)` of each factor.
    home: Vec<(usize, usize)>,
}

impl BlockLayout {
    fn new(graph: &FactorGraph, blocks: &[BlockPosterior]) -> Self {
        Self::from_members(graph, &blocks.iter().map(|b| b.members.clone()).collect::<Vec<_>>())
    }

    fn from_members(graph: &FactorGraph, members: &[Vec<usize>]) -> Self {
        let mut home = vec![(0, 0); graph.num_factors()];
        let mut configs = Vec::new();
        let mut observed = Vec::new();
        let mut observed_sizes = Vec::new();
        for (b, block) in members.iter().enumerate() {
            let sizes: Vec<usize> = block.iter().map(|&f| graph.factors[f].size).collect();
            configs.push(joint_configs(&sizes).collect());
            let mut obs = Vec::new();
            let mut obs_sizes = Vec::new();
            for (k, &f) in block.iter().enumerate() {
                home[f] = (b, k);
                if let Some(pos) = graph.observed.iter().position(|&g| g == f) {
                    obs.push((k, pos));
                    obs_sizes.push(sizes[k]);
                }
            }
            observed.push(obs);
            observed_sizes.push(obs_sizes);
        }
        Self {
            configs,
            observed,
            observed_sizes,
            home,
        }
    }

    fn observed_key(&self, b: usize, observed_cfg: &[usize]) -> usize {
        self.observed[b]
            .iter()
            .zip(&self.observed_sizes[b])
            .fold(0, |acc, (&(_, pos), &n)| acc * n + observed_cfg[pos])
    }

    fn block_key(&self, b: usize, c: usize) -> usize {
        let cfg = &self.configs[b][c];
        self.observed[b]
            .iter()
            .zip(&self.observed_sizes[b])
            .fold(0, |acc, (&(k, _), &n)| acc * n + cfg[k])
    }

    fn observed_marginal(&self, b: usize, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.observed_sizes[b].iter().product()];
        for (c, &p) in q.iter().enumerate() {
            out[self.block_key(b, c)] += p;
        }
        out
    }
}

/// The fixed pieces of one inference problem.
struct Problem<'a> {
    graph: FactorGraph,
    params: &'a LogParams,
    actions: &'a [Vec<usize>],
    horizon: usize,
    layout: BlockLayout,
    members: Vec<Vec<usize>>,
    observed_configs: Vec<Vec<usize>>,
    /// Summed log-likelihood over the observed joint, per time step.
    evidence: Vec<Option<ArrayD<f64>>>,
}

/// Mutable variational state: block chains plus cached factor views.
struct State {
    q: Vec<Vec<Vec<f64>>>,
    pair: Vec<Vec<Array2<f64>>>,
    /// `factor_q[f][t]`
    factor_q: Vec<Vec<Vec<f64>>>,
    /// `factor_pair[f][t]`
    factor_pair: Vec<Vec<Array2<f64>>>,
}

impl<'a> Problem<'a> {
    fn new(
        spec: &DiscreteLayerSpec,
        params: &'a LogParams,
        obs: &[Vec<Obs>],
        actions: &'a [Vec<usize>],
        members: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let graph = apply_generalised_structure(spec)?;
        let horizon = spec.horizon;
        check_actions(&graph, horizon, actions)?;
        if obs.len() > horizon {
            return Err(Error::LengthMismatch {
                what: "observations",
                expected: horizon,
                got: obs.len(),
            });
        }
        let evidence = (0..horizon)
            .map(|t| match obs.get(t) {
                Some(row) => time_evidence(spec, params, row),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = BlockLayout::from_members(&graph, &members);
        let observed_configs = joint_configs(&graph.observed_sizes()).collect();
        Ok(Self {
            graph,
            params,
            actions,
            horizon,
            layout,
            members,
            observed_configs,
            evidence,
        })
    }

    fn uniform_state(&self) -> State {
        let q: Vec<Vec<Vec<f64>>> = self
            .layout
            .configs
            .iter()
            .map(|c| vec![vec![1.0 / c.len() as f64; c.len()]; self.horizon])
            .collect();
        let pair = q
            .iter()
            .map(|chain| chain.windows(2).map(|w| outer(&w[0], &w[1])).collect())
            .collect();
        let mut state = State {
            q,
            pair,
            factor_q: vec![Vec::new(); self.graph.num_factors()],
            factor_pair: vec![Vec::new(); self.graph.num_factors()],
        };
        for b in 0..self.members.len() {
            self.refresh_factors(&mut state, b);
        }
        state
    }

    fn refresh_factors(&self, state: &mut State, b: usize) {
        let configs = &self.layout.configs[b];
        for (k, &f) in self.members[b].iter().enumerate() {
            let n = self.graph.factors[f].size;
            state.factor_q[f] = state.q[b]
                .iter()
                .map(|q| {
                    let mut m = vec![0.0; n];
                    for (cfg, &p) in configs.iter().zip(q) {
                        m[cfg[k]] += p;
                    }
                    m
                })
                .collect();
            let proj: Vec<usize> = configs.iter().map(|cfg| cfg[k]).collect();
            state.factor_pair[f] = state.pair[b].iter().map(|pair| project_pair(pair, &proj, n)).collect();
        }
    }

    /// Φ_b[c, c'] = Σ_{f in b} E ln B_f[c'_f, c_f, modulator].
    fn block_transition(&self, b: usize, t: usize, state: &State) -> Array2<f64> {
        let configs = &self.layout.configs[b];
        let n = configs.len();
        let mut phi = Array2::zeros((n, n));
        let out = phi.as_slice_mut().expect("fresh array is contiguous");
        for (k, &f) in self.members[b].iter().enumerate() {
            let lnb = self.params.transitions[f].as_standard_layout();
            let lnb = lnb.as_slice().expect("standard layout");
            let size = self.graph.factors[f].size;
            let mods = self.graph.modulator_size(f);
            // lnb[[s2, s, m]]
            let at = |s2: usize, s: usize, m: usize| lnb[(s2 * size + s) * mods + m];
            match self.graph.factors[f].modulator {
                Modulator::Factor(g) if self.layout.home[g].0 == b => {
                    let gk = self.layout.home[g].1;
                    for c in 0..n {
                        let (s, m) = (configs[c][k], configs[c][gk]);
                        for c2 in 0..n {
                            out[c * n + c2] += at(configs[c2][k], s, m);
                        }
                    }
                }
                modulator => {
                    // Table over (s, s2) with the modulator fixed or averaged out.
                    let table: Vec<f64> = match modulator {
                        Modulator::Factor(g) => {
                            let w = &state.factor_q[g][t];
                            (0..size * size)
                                .map(|i| {
                                    let (s, s2) = (i / size, i % size);
                                    w.iter()
                                        .enumerate()
                                        .filter(|(_, &p)| p > 0.0)
                                        .map(|(m, &p)| p * at(s2, s, m))
                                        .sum()
                                })
                                .collect()
                        }
                        Modulator::Action { control, .. } => {
                            let m = self.actions[t][control];
                            (0..size * size).map(|i| at(i % size, i / size, m)).collect()
                        }
                        Modulator::Fixed => (0..size * size).map(|i| at(i % size, i / size, 0)).collect(),
                    };
                    for c in 0..n {
                        let row = &table[configs[c][k] * size..(configs[c][k] + 1) * size];
                        for c2 in 0..n {
                            out[c * n + c2] += row[configs[c2][k]];
                        }
                    }
                }
            }
        }
        phi
    }

    /// Evidence tensor contracted against every block except `b`, keyed by
    /// the observed members of `b`.
    fn evidence_message(&self, b: usize, t: usize, state: &State) -> Option<Vec<f64>> {
        let ev = self.evidence[t].as_ref()?;
        let tables: Vec<Vec<f64>> = (0..self.members.len())
            .map(|other| {
                if other == b {
                    Vec::new()
                } else {
                    self.layout.observed_marginal(other, &state.q[other][t])
                }
            })
            .collect();
        let mut acc = vec![0.0; self.layout.observed_sizes[b].iter().product()];
        let flat = ev.as_slice().expect("standard layout");
        for (i, cfg) in self.observed_configs.iter().enumerate() {
            let mut w = 1.0;
            for (other, table) in tables.iter().enumerate() {
                if other != b {
                    w *= table[self.layout.observed_key(other, cfg)];
                }
            }
            if w > 0.0 {
                acc[self.layout.observed_key(b, cfg)] += w * flat[i];
            }
        }
        Some(acc)
    }

    fn unary(&self, b: usize, state: &State) -> Vec<Vec<f64>> {
        let configs = &self.layout.configs[b];
        let n = configs.len();
        // Factors outside the block whose transitions are modulated from inside.
        let modulated: Vec<(usize, usize)> = (0..self.graph.num_factors())
            .filter(|&f| self.layout.home[f].0 != b)
            .filter_map(|f| match self.graph.factors[f].modulator {
                Modulator::Factor(g) if self.layout.home[g].0 == b => Some((f, self.layout.home[g].1)),
                _ => None,
            })
            .collect();
        (0..self.horizon)
            .map(|t| {
                let mut u = vec![0.0; n];
                if t == 0 {
                    for (k, &f) in self.members[b].iter().enumerate() {
                        for (c, cfg) in configs.iter().enumerate() {
                            u[c] += self.params.initial[f][cfg[k]];
                        }
                    }
                }
                if let Some(msg) = self.evidence_message(b, t, state) {
                    for (c, x) in u.iter_mut().enumerate() {
                        *x += msg[self.layout.block_key(b, c)];
                    }
                }
                if t + 1 < self.horizon {
                    for &(f, gk) in &modulated {
                        let lnb = &self.params.transitions[f];
                        let pair = &state.factor_pair[f][t];
                        let e: Vec<f64> = (0..lnb.shape()[2])
                            .map(|m| {
                                pair.indexed_iter()
                                    .filter(|(_, &p)| p > 0.0)
                                    .map(|((s, s2), &p)| p * lnb[[s2, s, m]])
                                    .sum()
                            })
                            .collect();
                        for (c, cfg) in configs.iter().enumerate() {
                            u[c] += e[cfg[gk]];
                        }
                    }
                }
                u
            })
            .collect()
    }

    fn free_energy(&self, state: &State) -> f64 {
        let mut total = 0.0;
        for b in 0..self.members.len() {
            let block = BlockPosterior {
                members: Vec::new(),
                sizes: Vec::new(),
                marginals: state.q[b].clone(),
                pairwise: state.pair[b].clone(),
            };
            total += block.neg_entropy();
            for t in 0..self.horizon.saturating_sub(1) {
                let phi = self.block_transition(b, t, state);
                total -= state.pair[b][t]
                    .iter()
                    .zip(phi.iter())
                    .filter(|(&p, _)| p > 0.0)
                    .map(|(p, x)| p * x)
                    .sum::<f64>();
            }
        }
        for f in 0..self.graph.num_factors() {
            total -= dot(&state.factor_q[f][0], &self.params.initial[f]);
        }
        for t in 0..self.horizon {
            if let Some(ev) = &self.evidence[t] {
                let flat = ev.as_slice().expect("standard layout");
                let tables: Vec<Vec<f64>> = (0..self.members.len())
                    .map(|b| self.layout.observed_marginal(b, &state.q[b][t]))
                    .collect();
                for (i, cfg) in self.observed_configs.iter().enumerate() {
                    let w: f64 = (0..self.members.len())
                        .map(|b| tables[b][self.layout.observed_key(b, cfg)])
                        .product();
                    if w > 0.0 {
                        total -= w * flat[i];
                    }
                }
            }
        }
        total
    }

    fn state_from_posterior(&self, posterior: &StatePosterior) -> State {
        let mut state = State {
            q: posterior.blocks.iter().map(|b| b.marginals.clone()).collect(),
            pair: posterior.blocks.iter().map(|b| b.pairwise.clone()).collect(),
            factor_q: vec![Vec::new(); self.graph.num_factors()],
            factor_pair: vec![Vec::new(); self.graph.num_factors()],
        };
        for b in 0..self.members.len() {
            self.refresh_factors(&mut state, b);
        }
        state
    }

    fn into_posterior(&self, state: State) -> StatePosterior {
        let blocks = self
            .members
            .iter()
            .zip(state.q)
            .zip(state.pair)
            .map(|((members, marginals), pairwise)| BlockPosterior {
                sizes: members.iter().map(|&f| self.graph.factors[f].size).collect(),
                members: members.clone(),
                marginals,
                pairwise,
            })
            .collect();
        StatePosterior::from_blocks(blocks, self.graph.num_factors())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).filter(|(&x, _)| x > 0.0).map(|(x, y)| x * y).sum()
}

fn time_evidence(spec: &DiscreteLayerSpec, params: &LogParams, row: &[Obs]) -> Result<Option<ArrayD<f64>>> {
    if row.len() > spec.modality_sizes.len() {
        return Err(Error::LengthMismatch {
            what: "modalities",
            expected: spec.modality_sizes.len(),
            got: row.len(),
        });
    }
    let mut total: Option<ArrayD<f64>> = None;
    for (m, o) in row.iter().enumerate() {
        let ln_a = &params.likelihood[m];
        let n = spec.modality_sizes[m];
        let term = match o {
            Obs::Missing => continue,
            Obs::Outcome(v) => {
                if *v >= n {
                    return Err(Error::InvalidValue(format!(
                        "outcome {v} out of range for modality {m} with {n} values"
                    )));
                }
                ln_a.index_axis(Axis(0), *v).as_standard_layout().into_owned()
            }
            Obs::LogLikelihood(ll) => {
                if ll.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: ll.len(),
                    });
                }
                if ll.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                    return Err(Error::NonFinite);
                }
                let rest = ln_a.index_axis(Axis(0), 0).raw_dim();
                ArrayD::from_shape_fn(rest, |idx| {
                    let mut full = vec![0usize];
                    full.extend_from_slice(idx.slice());
                    let terms: Vec<f64> = (0..n)
                        .map(|v| {
                            full[0] = v;
                            ll[v] + ln_a[IxDyn(&full)]
                        })
                        .collect();
                    log_sum_exp(&terms)
                })
            }
        };
        total = Some(match total {
            Some(acc) => acc + term,
            None => term,
        });
    }
    Ok(total)
}

/// Exact posterior of a chain with unary log-potentials `u[t]` and pairwise
/// log-potentials `phi[t][[s_t, s_{t+1}]]`.
fn chain_posterior(u: &[Vec<f64>], phi: &[Array2<f64>]) -> (Vec<Vec<f64>>, Vec<Array2<f64>>) {
    let horizon = u.len();
    let n = u[0].len();
    let mut alpha = vec![vec![0.0; n]; horizon];
    alpha[0] = u[0].clone();
    let mut terms = vec![0.0; n];
    for t in 1..horizon {
        for s2 in 0..n {
            for s in 0..n {
                terms[s] = alpha[t - 1][s] + phi[t - 1][[s, s2]];
            }
            alpha[t][s2] = u[t][s2] + log_sum_exp(&terms);
        }
    }
    let mut beta = vec![vec![0.0; n]; horizon];
    for t in (0..horizon.saturating_sub(1)).rev() {
        for s in 0..n {
            for s2 in 0..n {
                terms[s2] = phi[t][[s, s2]] + u[t + 1][s2] + beta[t + 1][s2];
            }
            beta[t][s] = log_sum_exp(&terms);
        }
    }
    let marginals = (0..horizon)
        .map(|t| {
            let logs: Vec<f64> = (0..n).map(|s| alpha[t][s] + beta[t][s]).collect();
            normalise_logs(&logs)
        })
        .collect();
    let pairwise = (0..horizon.saturating_sub(1))
        .map(|t| {
            let mut logs = Array2::from_shape_fn((n, n), |(s, s2)| {
                alpha[t][s] + phi[t][[s, s2]] + u[t + 1][s2] + beta[t + 1][s2]
            });
            let z = log_sum_exp(logs.as_slice().expect("standard layout"));
            logs.mapv_inplace(|x| (x - z).exp());
            logs
        })
        .collect();
    (marginals, pairwise)
}

fn normalise_logs(logs: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logs);
    logs.iter().map(|x| (x - z).exp()).collect()
}

pub fn infer_states(model: &DiscreteLayerModel, obs: &[Vec<Obs>], actions: &[Vec<usize>]) -> Result<InferenceResult> {
    infer_states_with(&model.spec, &LogParams::from_model(model), obs, actions, &InferenceOptions::default())
}

/// State inference with explicit log-parameters (e.g. E[ln θ] when learning).
pub fn infer_states_with(
    spec: &DiscreteLayerSpec,
    params: &LogParams,
    obs: &[Vec<Obs>],
    actions: &[Vec<usize>],
    options: &InferenceOptions,
) -> Result<InferenceResult> {
    let graph = apply_generalised_structure(spec)?;
    let members = options.family.blocks(&graph);
    let problem = Problem::new(spec, params, obs, actions, members)?;
    let mut state = problem.uniform_state();
    let mut trace = FreeEnergyTrace::default();
    let mut converged = false;
    for _sweep in 0..options.max_sweeps {
        let mut max_change: f64 = 0.0;
        for b in 0..problem.members.len() {
            let u = problem.unary(b, &state);
            let phi: Vec<Array2<f64>> = (0..problem.horizon.saturating_sub(1))
                .map(|t| problem.block_transition(b, t, &state))
                .collect();
            let (marg, pair) = chain_posterior(&u, &phi);
            for (old, new) in state.q[b].iter().zip(&marg) {
                for (a, c) in old.iter().zip(new) {
                    max_change = max_change.max((a - c).abs());
                }
            }
            state.q[b] = marg;
            state.pair[b] = pair;
            problem.refresh_factors(&mut state, b);
        }
        trace.values.push(problem.free_energy(&state));
        if max_change < options.tolerance {
            converged = true;
            break;
        }
    }
    Ok(InferenceResult {
        posterior: problem.into_posterior(state),
        trace,
        converged,
    })
}

fn check_posterior_shape(graph: &FactorGraph, horizon: usize, posterior: &StatePosterior) -> Result<()> {
    let n = graph.num_factors();
    if posterior.marginals.len() != n || posterior.pairwise.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "posterior covers {} factors, model has {n}",
            posterior.marginals.len()
        )));
    }
    let mut seen = vec![false; n];
    for block in &posterior.blocks {
        for &f in &block.members {
            if f >= n || seen[f] {
                return Err(Error::ShapeMismatch(format!("block membership of factor {f}")));
            }
            seen[f] = true;
        }
        let size: usize = block.members.iter().map(|&f| graph.factors[f].size).product();
        if block.marginals.len() != horizon
            || block.pairwise.len() != horizon.saturating_sub(1)
            || block.marginals.iter().any(|q| q.len() != size)
        {
            return Err(Error::ShapeMismatch(format!("block {:?} shape", block.members)));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::ShapeMismatch("posterior blocks do not cover every factor".into()));
    }
    Ok(())
}

/// E_q[ln q − ln p(o, s)] for a block-factorised posterior.
pub fn variational_free_energy(
    model: &DiscreteLayerModel,
    posterior: &StatePosterior,
    obs: &[Vec<Obs>],
    actions: &[Vec<usize>],
) -> Result<f64> {
    variational_free_energy_with(&model.spec, &LogParams::from_model(model), posterior, obs, actions)
}

pub fn variational_free_energy_with(
    spec: &DiscreteLayerSpec,
    params: &LogParams,
    posterior: &StatePosterior,
    obs: &[Vec<Obs>],
    actions: &[Vec<usize>],
) -> Result<f64> {
    let graph = apply_generalised_structure(spec)?;
    check_posterior_shape(&graph, spec.horizon, posterior)?;
    let members = posterior.blocks.iter().map(|b| b.members.clone()).collect();
    let problem = Problem::new(spec, params, obs, actions, members)?;
    Ok(problem.free_energy(&problem.state_from_posterior(posterior)))
}

pub struct ExactPosterior {
    /// `marginals[f][t]`
    pub marginals: Vec<Vec<Vec<f64>>>,
    pub log_evidence: f64,
}

/// Exact smoothing marginals by summing the joint over every state sequence.
pub fn exact_posterior_oracle(
    model: &DiscreteLayerModel,
    obs: &[Vec<Obs>],
    actions: &[Vec<usize>],
) -> Result<ExactPosterior> {
    let graph = model.graph()?;
    let horizon = model.spec.horizon;
    check_actions(&graph, horizon, actions)?;
    let sizes = graph.sizes();
    let joint: usize = sizes.iter().product();
    if joint as f64 > ORACLE_LIMIT {
        return Err(Error::TooLarge {
            size: joint as f64,
            max: ORACLE_LIMIT,
        });
    }
    let total = (joint as f64).powi(horizon as i32);
    if total > SEQUENCE_LIMIT {
        return Err(Error::TooLarge {
            size: total,
            max: SEQUENCE_LIMIT,
        });
    }
    let configs: Vec<Vec<usize>> = crate::discrete::joint_configs(&sizes).collect();
    let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    let exact_params = LogParams {
        likelihood: model.likelihood.iter().map(|a| a.mapv(ln)).collect(),
        transitions: model.transitions.iter().map(|b| b.mapv(ln)).collect(),
        initial: model.initial.iter().map(|d| d.iter().map(|&p| ln(p)).collect()).collect(),
    };
    let evidence = (0..horizon)
        .map(|t| match obs.get(t) {
            Some(row) => time_evidence(&model.spec, &exact_params, row),
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let log_lik: Vec<Vec<f64>> = (0..horizon)
        .map(|t| {
            configs
                .iter()
                .map(|c| match &evidence[t] {
                    Some(ev) => {
                        let idx: Vec<usize> = graph.observed.iter().map(|&f| c[f]).collect();
                        ev[IxDyn(&idx)]
                    }
                    None => 0.0,
                })
                .collect()
        })
        .collect();
    let log_init: Vec<f64> = configs
        .iter()
        .map(|c| c.iter().enumerate().map(|(f, &s)| exact_params.initial[f][s]).sum())
        .collect();
    let log_trans: Vec<Vec<Vec<f64>>> = (0..horizon.saturating_sub(1))
        .map(|t| {
            configs
                .iter()
                .map(|c| {
                    configs
                        .iter()
                        .map(|c2| {
                            (0..graph.num_factors())
                                .map(|f| {
                                    let m = crate::discrete::modulator_index(&graph, f, c, actions, t);
                                    exact_params.transitions[f][[c2[f], c[f], m]]
                                })
                                .sum()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    // Single pass with a running maximum; accumulators are rescaled whenever
    // the maximum grows.
    let mut seq = vec![0usize; horizon];
    let mut running_max = f64::NEG_INFINITY;
    let mut z = 0.0;
    let mut marg_joint = vec![vec![0.0; joint]; horizon];
    enumerate(0, 0.0, &mut seq, &log_init, &log_trans, &log_lik, joint, &mut |lw, s| {
        if lw > running_max {
            let scale = (running_max - lw).exp();
            z *= scale;
            for row in marg_joint.iter_mut() {
                row.iter_mut().for_each(|x| *x *= scale);
            }
            running_max = lw;
        }
        let p = (lw - running_max).exp();
        z += p;
        for (t, &j) in s.iter().enumerate() {
            marg_joint[t][j] += p;
        }
    });
    if z == 0.0 {
        return Err(Error::InvalidValue("observations have zero probability".into()));
    }
    let log_z = running_max + z.ln();
    for row in marg_joint.iter_mut() {
        row.iter_mut().for_each(|x| *x /= z);
    }
    let marginals = (0..graph.num_factors())
        .map(|f| {
            (0..horizon)
                .map(|t| {
                    let mut m = vec![0.0; sizes[f]];
                    for (j, c) in configs.iter().enumerate() {
                        m[c[f]] += marg_joint[t][j];
                    }
                    m
                })
                .collect()
        })
        .collect();
    Ok(ExactPosterior {
        marginals,
        log_evidence: log_z,
    })
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    t: usize,
    acc: f64,
    seq: &mut Vec<usize>,
    log_init: &[f64],
    log_trans: &[Vec<Vec<f64>>],
    log_lik: &[Vec<f64>],
    joint: usize,
    visit: &mut dyn FnMut(f64, &[usize]),
) {
    let horizon = seq.len();
    for j in 0..joint {
        let step = if t == 0 {
            log_init[j]
        } else {
            log_trans[t - 1][seq[t - 1]][j]
        };
        let lw = acc + step + log_lik[t][j];
        if lw == f64::NEG_INFINITY {
            continue;
        }
        seq[t] = j;
        if t + 1 == horizon {
            visit(lw, seq);
        } else {
            enumerate(t + 1, lw, seq, log_init, log_trans, log_lik, joint, visit);
        }
    }
}

/// Adds `rate` × expected sufficient statistics to the Dirichlet counts.
pub fn update_parameters(
    dir: &DirichletModel,
    posterior: &StatePosterior,
    obs: &[Vec<Obs>],
    actions: &[Vec<usize>],
    rate: f64,
) -> Result<DirichletModel> {
    if !rate.is_finite() || rate < 0.0 {
        return Err(Error::InvalidValue(format!("learning rate {rate}")));
    }
    let spec = &dir.spec;
    let graph = apply_generalised_structure(spec)?;
    let horizon = spec.horizon;
    check_actions(&graph, horizon, actions)?;
    check_posterior_shape(&graph, horizon, posterior)
        .map_err(|e| Error::ShapeMismatch(format!("posterior does not match the Dirichlet model: {e}")))?;
    if obs.len() > horizon || obs.iter().any(|row| row.len() > spec.modality_sizes.len()) {
        return Err(Error::ShapeMismatch("observations do not match the Dirichlet model".into()));
    }
    let mut out = dir.clone();
    if rate == 0.0 {
        return Ok(out);
    }

    let observed_sizes = graph.observed_sizes();
    for (t, row) in obs.iter().enumerate() {
        if row.iter().all(|o| matches!(o, Obs::Missing)) {
            continue;
        }
        let weights = posterior.observed_weight(&graph, t);
        for (m, o) in row.iter().enumerate() {
            let n = spec.modality_sizes[m];
            let mean = dir.likelihood[m].mean();
            let counts = out.likelihood[m].counts_mut();
            for (cfg, &w) in joint_configs(&observed_sizes).zip(weights.iter()) {
                if w == 0.0 {
                    continue;
                }
                let mut idx = vec![0usize];
                idx.extend_from_slice(&cfg);
                match o {
                    Obs::Missing => {}
                    Obs::Outcome(v) => {
                        if *v >= n {
                            return Err(Error::ShapeMismatch(format!("outcome {v} out of range")));
                        }
                        idx[0] = *v;
                        counts[IxDyn(&idx)] += rate * w;
                    }
                    Obs::LogLikelihood(ll) => {
                        if ll.len() != n {
                            return Err(Error::ShapeMismatch(format!("soft observation of length {}", ll.len())));
                        }
                        let logs: Vec<f64> = (0..n)
                            .map(|v| {
                                idx[0] = v;
                                ll[v] + safe_ln(mean[IxDyn(&idx)])
                            })
                            .collect();
                        for (v, p) in normalise_logs(&logs).into_iter().enumerate() {
                            idx[0] = v;
                            counts[IxDyn(&idx)] += rate * w * p;
                        }
                    }
                }
            }
        }
    }

    for f in 0..graph.num_factors() {
        for t in 0..horizon.saturating_sub(1) {
            let stats = posterior.transition_stats(&graph, f, t, actions);
            let counts = out.transitions[f].counts_mut();
            for ((s2, s, m), &p) in stats.indexed_iter() {
                counts[[s2, s, m]] += rate * p;
            }
        }
        let counts = out.initial[f].counts_mut();
        for (s, &p) in posterior.marginals[f][0].probs().iter().enumerate() {
            counts[[s]] += rate * p;
        }
    }
    Ok(out)
}
#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::{sample_trajectory, DiscreteLayerSpec};
        use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_model(n: usize, horizon: usize) -> DiscreteLayerModel {
        let spec = DiscreteLayerSpec::new(vec![n], vec![n], horizon);
        let mut m = DiscreteLayerModel::uniform(spec).unwrap();
        m.likelihood[0] = Array2::<f64>::eye(n).into_dyn();
        m
    }

    #[test]
    fn disambiguating_observations_give_one_hot_posterior() {
        let mut m = identity_model(3, 3);
        let mut b = ArrayD::zeros(IxDyn(&[3, 3, 1]));
        for s in 0..3 {
            b[[(s + 1) % 3, s, 0]] = 1.0;
        }
        m.transitions[0] = b;
        m.initial[0] = vec![1.0, 0.0, 0.0];
        let obs = observations_from_indices(&[vec![0], vec![1], vec![2]]);
        let r = infer_states(&m, &obs, &[]).unwrap();
        for (t, c) in r.posterior.marginals[0].iter().enumerate() {
            assert_abs_diff_eq!(c.probs()[t], 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(r.free_energy(), 0.0, epsilon = 1e-9);
        assert!(r.converged);
    }

    #[test]
    fn uniform_model_gives_uniform_posterior() {
        let spec = DiscreteLayerSpec::new(vec![3, 2], vec![4], 3);
        let m = DiscreteLayerModel::uniform(spec).unwrap();
        let obs = observations_from_indices(&[vec![0], vec![3], vec![1]]);
        let r = infer_states(&m, &obs, &[]).unwrap();
        for chain in &r.posterior.marginals {
            for c in chain {
                let n = c.len() as f64;
                for p in c.probs() {
                    assert_abs_diff_eq!(*p, 1.0 / n, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_binary_observation_costs_ln2() {
        let spec = DiscreteLayerSpec::new(vec![2], vec![2], 1);
        let m = DiscreteLayerModel::uniform(spec).unwrap();
        let obs = observations_from_indices(&[vec![1]]);
        let r = infer_states(&m, &obs, &[]).unwrap();
        assert_abs_diff_eq!(r.free_energy(), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_step_is_bayes_rule() {
        let spec = DiscreteLayerSpec::new(vec![2], vec![2], 1);
        let mut m = DiscreteLayerModel::uniform(spec).unwrap();
        m.likelihood[0] = arr2(&[[0.8, 0.3], [0.2, 0.7]]).into_dyn();
        m.initial[0] = vec![0.4, 0.6];
        let obs = observations_from_indices(&[vec![0]]);
        let exact = exact_posterior_oracle(&m, &obs, &[]).unwrap();
        let z = 0.4 * 0.8 + 0.6 * 0.3;
        assert_abs_diff_eq!(exact.marginals[0][0][0], 0.32 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(exact.log_evidence, z.ln(), epsilon = 1e-15);
        let r = infer_states(&m, &obs, &[]).unwrap();
        assert_abs_diff_eq!(r.posterior.marginals[0][0].probs()[0], 0.32 / z, epsilon = 1e-12);
    }

    #[test]
    fn oracle_rejects_large_spaces() {
        let spec = DiscreteLayerSpec::new(vec![10, 10, 10], vec![2], 4);
        let m = DiscreteLayerModel::uniform(spec).unwrap();
        assert!(matches!(exact_posterior_oracle(&m, &[], &[]), Err(Error::TooLarge { .. })));
    }

    fn factorised() -> InferenceOptions {
        InferenceOptions {
            family: Family::Factorised,
            ..InferenceOptions::default()
        }
    }

    #[test]
    fn joint_family_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for seed in 0..10 {
            let spec = DiscreteLayerSpec::new(vec![3, 3], vec![3, 2], 3);
            let m = DiscreteLayerModel::random(spec, &mut rng, 1.0).unwrap();
            let traj = sample_trajectory(&m, &[], seed).unwrap();
            let obs = observations_from_indices(&traj.observations);
            let exact = exact_posterior_oracle(&m, &obs, &[]).unwrap();
            let r = infer_states(&m, &obs, &[]).unwrap();
            assert_eq!(r.posterior.blocks.len(), 1);
            for f in 0..2 {
                for t in 0..3 {
                    for s in 0..3 {
                        assert_abs_diff_eq!(r.posterior.marginal(f, t).probs()[s], exact.marginals[f][t][s], epsilon = 1e-9);
                    }
                }
            }
            assert_abs_diff_eq!(r.free_energy(), -exact.log_evidence, epsilon = 1e-9);
        }
    }

    #[test]
    fn factorised_family_bounds_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for seed in 0..10 {
            let spec = DiscreteLayerSpec::new(vec![3, 2], vec![3, 2], 3);
            let m = DiscreteLayerModel::random(spec.clone(), &mut rng, 1.0).unwrap();
            let traj = sample_trajectory(&m, &[], seed).unwrap();
            let obs = observations_from_indices(&traj.observations);
            let exact = exact_posterior_oracle(&m, &obs, &[]).unwrap();
            let r = infer_states_with(&spec, &LogParams::from_model(&m), &obs, &[], &factorised()).unwrap();
            assert_eq!(r.posterior.blocks.len(), 2);
            assert!(r.free_energy() >= -exact.log_evidence - 1e-9);
            let again = variational_free_energy(&m, &r.posterior, &obs, &[]).unwrap();
            assert_abs_diff_eq!(again, r.free_energy(), epsilon = 1e-12);
        }
    }

    #[test]
    fn auto_family_falls_back_by_size() {
        let spec = DiscreteLayerSpec::new(vec![4, 4], vec![2], 2).with_generalised(2, vec![true, true], vec![3, 3]);
        let graph = apply_generalised_structure(&spec).unwrap();
        assert_eq!(graph.num_factors(), 6);
        let blocks = Family::Auto { max_block: 64 }.blocks(&graph);
        assert_eq!(blocks.len(), 2);
        assert_eq!(Family::Auto { max_block: 8 }.blocks(&graph).len(), 6);
        assert_eq!(Family::Auto { max_block: 100_000 }.blocks(&graph).len(), 1);
    }

    #[test]
    fn single_factor_chain_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = DiscreteLayerSpec::new(vec![3], vec![3], 4).with_control(0, 2);
        let m = DiscreteLayerModel::random(spec, &mut rng, 0.5).unwrap();
        let actions = vec![vec![1], vec![0], vec![1]];
        let traj = sample_trajectory(&m, &actions, 3).unwrap();
        let obs = observations_from_indices(&traj.observations);
        let exact = exact_posterior_oracle(&m, &obs, &actions).unwrap();
        let r = infer_states(&m, &obs, &actions).unwrap();
        for t in 0..4 {
            for s in 0..3 {
                assert_abs_diff_eq!(r.posterior.marginals[0][t].probs()[s], exact.marginals[0][t][s], epsilon = 1e-9);
            }
        }
        assert_abs_diff_eq!(r.free_energy(), -exact.log_evidence, epsilon = 1e-9);
    }

    #[test]
    fn trace_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20 {
            let spec = DiscreteLayerSpec::new(vec![2, 3, 2], vec![3], 4).with_generalised(1, vec![true, false, false], vec![2]);
            let m = DiscreteLayerModel::random(spec, &mut rng, 0.5).unwrap();
            let traj = sample_trajectory(&m, &[], seed).unwrap();
            let obs = observations_from_indices(&traj.observations);
            for options in [factorised(), InferenceOptions { family: Family::PerBaseFactor, ..InferenceOptions::default() }] {
                let r = infer_states_with(&m.spec, &LogParams::from_model(&m), &obs, &[], &options).unwrap();
                for w in r.trace.values.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9, "{:?}", r.trace.values);
                }
                let exact = exact_posterior_oracle(&m, &obs, &[]).unwrap();
                assert!(r.free_energy() >= -exact.log_evidence - 1e-9);
            }
        }
    }

    #[test]
    fn missing_observations_fall_back_to_prior_dynamics() {
        let mut m = identity_model(2, 3);
        m.transitions[0] = arr2(&[[0.9, 0.2], [0.1, 0.8]]).into_shape_with_order((2, 2, 1)).unwrap().into_dyn();
        m.initial[0] = vec![0.5, 0.5];
        let obs = vec![vec![Obs::Outcome(0)]];
        let r = infer_states(&m, &obs, &[]).unwrap();
        // q(s1) = B[:,0] after a certain s0 = 0
        assert_abs_diff_eq!(r.posterior.marginals[0][1].probs()[0], 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(r.posterior.marginals[0][2].probs()[0], 0.9 * 0.9 + 0.1 * 0.2, epsilon = 1e-9);
    }

    #[test]
    fn update_rate_zero_is_identity() {
        let m = identity_model(2, 2);
        let dir = DirichletModel::flat(m.spec.clone(), 1.0).unwrap();
        let obs = observations_from_indices(&[vec![0], vec![1]]);
        let r = infer_states(&m, &obs, &[]).unwrap();
        assert_eq!(update_parameters(&dir, &r.posterior, &obs, &[], 0.0).unwrap(), dir);
    }

    #[test]
    fn one_hot_update_increments_one_entry() {
        let spec = DiscreteLayerSpec::new(vec![2], vec![3], 1);
        let dir = DirichletModel::flat(spec, 1.0).unwrap();
        let post = StatePosterior::from_marginals(vec![vec![Categorical::one_hot(2, 1)]]);
        let obs = observations_from_indices(&[vec![2]]);
        let new = update_parameters(&dir, &post, &obs, &[], 1.0).unwrap();
        let diff = new.likelihood[0].counts() - dir.likelihood[0].counts();
        assert_eq!(diff.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(diff[[2, 1]], 1.0);
    }

    #[test]
    fn update_rates_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = DiscreteLayerSpec::new(vec![2, 2], vec![3], 3).with_control(1, 2);
        let m = DiscreteLayerModel::random(spec.clone(), &mut rng, 1.0).unwrap();
        let actions = vec![vec![0], vec![1]];
        let traj = sample_trajectory(&m, &actions, 2).unwrap();
        let obs = observations_from_indices(&traj.observations);
        let r = infer_states(&m, &obs, &actions).unwrap();
        let dir = DirichletModel::flat(spec, 0.5).unwrap();
        let twice = update_parameters(
            &update_parameters(&dir, &r.posterior, &obs, &actions, 0.3).unwrap(),
            &r.posterior,
            &obs,
            &actions,
            0.3,
        )
        .unwrap();
        let once = update_parameters(&dir, &r.posterior, &obs, &actions, 0.6).unwrap();
        for (a, b) in twice.likelihood.iter().chain(&twice.transitions).chain(&twice.initial).zip(
            once.likelihood.iter().chain(&once.transitions).chain(&once.initial),
        ) {
            for (x, y) in a.counts().iter().zip(b.counts()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = DirichletModel::flat(DiscreteLayerSpec::new(vec![2], vec![2], 2), 1.0).unwrap();
        let post = StatePosterior::from_marginals(vec![vec![Categorical::uniform(3); 2]]);
        let obs = observations_from_indices(&[vec![0], vec![1]]);
        assert!(matches!(update_parameters(&dir, &post, &obs, &[], 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn transition_stats_use_block_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = DiscreteLayerSpec::new(vec![3], vec![3], 3).with_generalised(1, vec![true], vec![2]);
        let m = DiscreteLayerModel::random(spec, &mut rng, 1.0).unwrap();
        let traj = sample_trajectory(&m, &[], 0).unwrap();
        let obs = observations_from_indices(&traj.observations);
        let r = infer_states(&m, &obs, &[]).unwrap();
        let graph = m.graph().unwrap();
        let stats = r.posterior.transition_stats(&graph, 0, 1, &[]);
        assert_abs_diff_eq!(stats.sum(), 1.0, epsilon = 1e-12);
        // Summing out the modulator recovers the factor's own pairwise joint.
        let summed = stats.sum_axis(Axis(2));
        for ((s, s2), &p) in r.posterior.pairwise[0][1].indexed_iter() {
            assert_abs_diff_eq!(summed[[s2, s]], p, epsilon = 1e-12);
        }
        // Summing out the transition recovers the modulator marginal.
        let q = r.posterior.marginal(1, 1).probs();
        for mm in 0..2 {
            let total: f64 = stats.index_axis(Axis(2), mm).sum();
            assert_abs_diff_eq!(total, q[mm], epsilon = 1e-12);
        }
    }
}
