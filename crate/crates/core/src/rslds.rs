//! Recurrent switching linear dynamical systems: K linear SDE regimes whose
//! switching depends on the previous regime, the previous continuous state
//! and an optional action.
//!
//! Time convention: `z_t ~ switch(z_{t-1}, x_{t-1}, a_{t-1})`, then
//! `x_t = F_{z_t} x_{t-1} + u_{z_t} + w_t` and `y_t = C x_t + v_t`. The
//! first regime only matters through the Markov logits of the second.

use std::ops::AddAssign;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, RealField, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::beliefs::{check_psd, Categorical, GaussianBelief};
use crate::discrete::sample_index;
use crate::error::{Error, Result};

pub const JITTER: f64 = 1e-9;
pub const MAX_GENERALISED_ORDER: usize = 3;
/// Regime pairs whose prior log-mass falls below this are not propagated.
pub const PRUNE_LOG_MASS: f64 = -200.0;

/// Continuous-time parameters of one regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    /// Drift matrix A (1/time).
    pub drift: DMatrix<f64>,
    /// Bias b (state/time).
    pub bias: DVector<f64>,
    /// Volatility Q (state²/time).
    pub volatility: DMatrix<f64>,
}

/// Euler-discretised regime: `x' = F x + u + w`, `w ~ N(0, Q_d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteRegime {
    pub transition: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DMatrix<f64>,
}

pub fn euler_discretise(regime: &RegimeParams, dt: f64) -> Result<DiscreteRegime> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidValue(format!("dt = {dt}")));
    }
    let d = regime.drift.nrows();
    Ok(DiscreteRegime {
        transition: DMatrix::identity(d, d) + &regime.drift * dt,
        offset: &regime.bias * dt,
        noise: &regime.volatility * dt,
    })
}

/// Inverse of [`euler_discretise`].
pub fn continuous_from_discrete(regime: &DiscreteRegime, dt: f64) -> RegimeParams {
    let d = regime.transition.nrows();
    RegimeParams {
        drift: (&regime.transition - DMatrix::identity(d, d)) / dt,
        bias: &regime.offset / dt,
        volatility: &regime.noise / dt,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentRule {
    /// `markov_logits[(z_prev, z)]`
    pub markov_logits: DMatrix<f64>,
    /// `recurrent_w[(z, i)]`, weight of `x_prev[i]` on the logit of `z`.
    pub recurrent_w: DMatrix<f64>,
    pub recurrent_r: DVector<f64>,
    /// `action_logits[(z, a)]`
    pub action_logits: Option<DMatrix<f64>>,
}

impl RecurrentRule {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            markov_logits: DMatrix::zeros(k, k),
            recurrent_w: DMatrix::zeros(k, d),
            recurrent_r: DVector::zeros(k),
            action_logits: None,
        }
    }

    /// Flattened logits: Markov (row-major), W (row-major), r, then action
    /// logits (row-major) when present.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.markov_logits, &self.recurrent_w] {
            for i in 0..m.nrows() {
                out.extend(m.row(i).iter());
            }
        }
        out.extend(self.recurrent_r.iter());
        if let Some(a) = &self.action_logits {
            for i in 0..a.nrows() {
                out.extend(a.row(i).iter());
            }
        }
        out
    }

    pub fn with_vec(&self, v: &[f64]) -> Self {
        let generic = self.generic(v);
        Self {
            markov_logits: generic.markov,
            recurrent_w: generic.w,
            recurrent_r: generic.r,
            action_logits: generic.action,
        }
    }

    pub fn len(&self) -> usize {
        let k = self.markov_logits.nrows();
        k * k + self.recurrent_w.len() + k + self.action_logits.as_ref().map_or(0, |a| a.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn generic<T: RealField + Copy>(&self, v: &[T]) -> GenericRule<T> {
        let k = self.markov_logits.nrows();
        let d = self.recurrent_w.ncols();
        let mut it = v.iter().copied();
        let mut take = |rows: usize, cols: usize| {
            let data: Vec<T> = (0..rows * cols).map(|_| it.next().expect("logit vector length")).collect();
            DMatrix::from_row_slice(rows, cols, &data)
        };
        let markov = take(k, k);
        let w = take(k, d);
        let r = take(k, 1).column(0).into_owned();
        let action = self.action_logits.as_ref().map(|a| take(a.nrows(), a.ncols()));
        GenericRule { markov, w, r, action }
    }
}

struct GenericRule<T: RealField + Copy> {
    markov: DMatrix<T>,
    w: DMatrix<T>,
    r: DVector<T>,
    action: Option<DMatrix<T>>,
}

impl<T: RealField + Copy> GenericRule<T> {
    fn log_switch(&self, z_prev: usize, x_prev: &DVector<T>, action: Option<usize>) -> Vec<T> {
        let k = self.markov.nrows();
        let wx = &self.w * x_prev;
        let logits: Vec<T> = (0..k)
            .map(|z| {
                let mut l = self.markov[(z_prev, z)] + wx[z] + self.r[z];
                if let (Some(a), Some(table)) = (action, &self.action) {
                    l += table[(z, a)];
                }
                l
            })
            .collect();
        let lse = log_sum_exp_t(&logits);
        logits.into_iter().map(|l| l - lse).collect()
    }
}

fn log_sum_exp_t<T: RealField + Copy>(xs: &[T]) -> T {
    let mut max = xs[0];
    for &x in &xs[1..] {
        max = max.max(x);
    }
    if !max.is_finite() {
        return max;
    }
    let s = xs.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + s.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionModel {
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsldsModel {
    pub regimes: Vec<RegimeParams>,
    pub rule: RecurrentRule,
    pub emission: EmissionModel,
    pub dt: f64,
    pub initial_regime: Categorical,
    pub initial_state: GaussianBelief,
}

impl RsldsModel {
    pub fn num_regimes(&self) -> usize {
        self.regimes.len()
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.emission.c.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.rule.action_logits.as_ref().map_or(0, |a| a.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.regimes.len();
        let d = self.state_dim();
        if k == 0 {
            return Err(Error::InvalidModel("no regimes".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidModel(format!("dt = {}", self.dt)));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if r.drift.shape() != (d, d) || r.bias.len() != d || r.volatility.shape() != (d, d) {
                return Err(Error::InvalidModel(format!("regime {i} dimensions differ from state dimension {d}")));
            }
            if r.drift.iter().chain(r.bias.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite);
            }
            check_psd(&r.volatility, "volatility")?;
        }
        let rule = &self.rule;
        if rule.markov_logits.shape() != (k, k) || rule.recurrent_w.shape() != (k, d) || rule.recurrent_r.len() != k {
            return Err(Error::InvalidModel("recurrent rule dimensions".into()));
        }
        if let Some(a) = &rule.action_logits {
            if a.nrows() != k {
                return Err(Error::InvalidModel("action logits must have one row per regime".into()));
            }
        }
        if rule.to_vec().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let p = self.obs_dim();
        if self.emission.c.ncols() != d || self.emission.r.shape() != (p, p) {
            return Err(Error::InvalidModel("emission dimensions".into()));
        }
        if self.emission.c.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        check_psd(&self.emission.r, "observation noise")?;
        if self.initial_regime.len() != k {
            return Err(Error::InvalidModel("initial regime distribution size".into()));
        }
        Ok(())
    }

    pub fn discretised(&self) -> Result<Vec<DiscreteRegime>> {
        self.regimes.iter().map(|r| euler_discretise(r, self.dt)).collect()
    }

    /// Number of free real parameters (symmetric matrices counted once).
    pub fn parameter_count(&self) -> usize {
        let k = self.num_regimes();
        let d = self.state_dim();
        let p = self.obs_dim();
        let sym = |n: usize| n * (n + 1) / 2;
        let regimes = k * (d * d + d + sym(d));
        let rule = if k > 1 { self.rule.len() } else { 0 };
        regimes + rule + p * d + sym(p) + (k - 1) + d + sym(d)
    }

    /// Single-regime model with the given dynamics.
    pub fn linear(regime: RegimeParams, emission: EmissionModel, dt: f64, initial_state: GaussianBelief) -> Result<Self> {
        let d = initial_state.dim();
        let m = Self {
            regimes: vec![regime],
            rule: RecurrentRule::zeros(1, d),
            emission,
            dt,
            initial_regime: Categorical::uniform(1),
            initial_state,
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn switch_distribution(rule: &RecurrentRule, z_prev: usize, x_prev: &DVector<f64>, action: Option<usize>) -> Result<Categorical> {
    let k = rule.markov_logits.nrows();
    if z_prev >= k {
        return Err(Error::InvalidValue(format!("regime {z_prev} out of range")));
    }
    if x_prev.len() != rule.recurrent_w.ncols() {
        return Err(Error::DimensionMismatch {
            expected: rule.recurrent_w.ncols(),
            got: x_prev.len(),
        });
    }
    if let Some(a) = action {
        match &rule.action_logits {
            Some(t) if a < t.ncols() => {}
            _ => return Err(Error::InvalidAction(a)),
        }
    }
    let g = rule.generic(&rule.to_vec());
    let logp = g.log_switch(z_prev, x_prev, action);
    Categorical::new(logp.iter().map(|l| l.exp()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub regimes: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

/// Symmetric square root that tolerates singular PSD matrices.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.iter().all(|&x| x == 0.0) {
        return m.clone();
    }
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn gaussian_draw(rng: &mut ChaCha8Rng, root: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(root.ncols(), |_, _| StandardNormal.sample(rng));
    root * z
}

fn check_actions(model: &RsldsModel, horizon: usize, actions: Option<&[usize]>) -> Result<()> {
    if let Some(a) = actions {
        if a.len() + 1 != horizon {
            return Err(Error::LengthMismatch {
                what: "actions",
                expected: horizon.saturating_sub(1),
                got: a.len(),
            });
        }
        if let Some(&bad) = a.iter().find(|&&x| x >= model.num_actions()) {
            return Err(Error::InvalidAction(bad));
        }
    }
    Ok(())
}

/// Ancestral sampling; `actions[t]` drives the switch into step `t + 1`.
pub fn simulate(model: &RsldsModel, horizon: usize, seed: u64, actions: Option<&[usize]>) -> Result<Simulation> {
    model.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidValue("horizon must be at least 1".into()));
    }
    check_actions(model, horizon, actions)?;
    let regimes = model.discretised()?;
    let roots: Vec<DMatrix<f64>> = regimes.iter().map(|r| psd_sqrt(&r.noise)).collect();
    let obs_root = psd_sqrt(&model.emission.r);
    let init_root = psd_sqrt(&model.initial_state.covariance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut z = sample_index(model.initial_regime.probs().iter().copied(), &mut rng);
    let mut x = &model.initial_state.mean + gaussian_draw(&mut rng, &init_root);
    let mut out = Simulation {
        regimes: Vec::with_capacity(horizon),
        states: Vec::with_capacity(horizon),
        observations: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        if t > 0 {
            let a = actions.map(|a| a[t - 1]);
            let probs = switch_distribution(&model.rule, z, &x, a)?;
            z = sample_index(probs.probs().iter().copied(), &mut rng);
            let r = &regimes[z];
            x = &r.transition * &x + &r.offset + gaussian_draw(&mut rng, &roots[z]);
        }
        let y = &model.emission.c * &x + gaussian_draw(&mut rng, &obs_root);
        out.regimes.push(z);
        out.states.push(x.clone());
        out.observations.push(y);
    }
    Ok(out)
}

/// Model parameters in scalar type `T`, with the rule logits supplied
/// separately so they can carry derivatives.
struct GenericModel<T: RealField + Copy> {
    f: Vec<DMatrix<T>>,
    u: Vec<DVector<T>>,
    q: Vec<DMatrix<T>>,
    c: DMatrix<T>,
    r: DMatrix<T>,
    rule: GenericRule<T>,
    log_init: Vec<T>,
    init_mean: DVector<T>,
    init_cov: DMatrix<T>,
}

fn lift<T: RealField + Copy>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(|x| nalgebra::convert::<f64, T>(x))
}

fn lift_v<T: RealField + Copy>(v: &DVector<f64>) -> DVector<T> {
    v.map(|x| nalgebra::convert::<f64, T>(x))
}

impl<T: RealField + Copy> GenericModel<T> {
    fn new(model: &RsldsModel, logits: &[T]) -> Result<Self> {
        let regimes = model.discretised()?;
        Ok(Self {
            f: regimes.iter().map(|r| lift(&r.transition)).collect(),
            u: regimes.iter().map(|r| lift_v(&r.offset)).collect(),
            q: regimes.iter().map(|r| lift(&r.noise)).collect(),
            c: lift(&model.emission.c),
            r: lift(&model.emission.r),
            rule: model.rule.generic(logits),
            log_init: model
                .initial_regime
                .probs()
                .iter()
                .map(|&p| nalgebra::convert::<f64, T>(crate::beliefs::safe_ln(p)))
                .collect(),
            init_mean: lift_v(&model.initial_state.mean),
            init_cov: lift(&model.initial_state.covariance),
        })
    }
}

/// Per-step filter output in scalar type `T`.
struct GenericStep<T: RealField + Copy> {
    /// Filtered regime log-probabilities.
    log_weights: Vec<T>,
    means: Vec<DVector<T>>,
    covs: Vec<DMatrix<T>>,
    /// One-step predicted observation mean (before seeing `y_t`).
    predicted: DVector<T>,
    /// `log_switch[i][j]` used to enter this step from regime `i` (empty at t = 0).
    log_switch: Vec<Vec<T>>,
    /// `ln p(y_t | y_<t)`.
    log_lik: T,
}

struct Update<T: RealField + Copy> {
    mean: DVector<T>,
    cov: DMatrix<T>,
    log_lik: T,
}

fn symmetrise<T: RealField + Copy>(m: DMatrix<T>) -> DMatrix<T> {
    let half: T = nalgebra::convert(0.5);
    (&m + m.transpose()) * half
}

fn cholesky_jittered<T: RealField + Copy>(s: &DMatrix<T>, step: usize) -> Result<Cholesky<T, Dyn>> {
    if let Some(ch) = Cholesky::new(s.clone()) {
        return Ok(ch);
    }
    let n = s.nrows();
    let jittered = s + DMatrix::<T>::identity(n, n) * nalgebra::convert::<f64, T>(JITTER);
    Cholesky::new(jittered).ok_or(Error::DegenerateCovariance { step })
}

fn kalman_update<T: RealField + Copy>(
    mean: DVector<T>,
    cov: DMatrix<T>,
    y: &DVector<T>,
    c: &DMatrix<T>,
    r: &DMatrix<T>,
    step: usize,
) -> Result<Update<T>> {
    let s = symmetrise(c * &cov * c.transpose() + r);
    let chol = cholesky_jittered(&s, step)?;
    let innovation = y - c * &mean;
    let pct = &cov * c.transpose();
    // K = P Cᵀ S⁻¹ computed as (S⁻¹ C P)ᵀ.
    let gain = chol.solve(&pct.transpose()).transpose();
    let new_mean = &mean + &gain * &innovation;
    let new_cov = symmetrise(&cov - &gain * pct.transpose());
    let white = chol.l().solve_lower_triangular(&innovation).expect("triangular factor");
    let log_det = chol.l().diagonal().iter().fold(T::zero(), |acc, &x| acc + x.ln());
    let p: T = nalgebra::convert(y.len() as f64);
    let two_pi: T = nalgebra::convert(2.0 * std::f64::consts::PI);
    let half: T = nalgebra::convert(0.5);
    let log_lik = -(p * two_pi.ln() * half) - log_det - white.dot(&white) * half;
    Ok(Update {
        mean: new_mean,
        cov: new_cov,
        log_lik,
    })
}

/// GPB2 filter; returns the log-evidence and, when `keep`, the per-step record.
fn run_filter<T: RealField + Copy>(
    model: &GenericModel<T>,
    ys: &[DVector<f64>],
    actions: Option<&[usize]>,
    keep: bool,
) -> Result<(T, Vec<GenericStep<T>>)> {
    let k = model.f.len();
    let mut steps = Vec::new();
    let mut log_evidence = T::zero();

    // t = 0: every regime shares the initial Gaussian.
    let y0 = lift_v(&ys[0]);
    let first = kalman_update(model.init_mean.clone(), model.init_cov.clone(), &y0, &model.c, &model.r, 0)?;
    log_evidence += first.log_lik;
    let mut log_w = model.log_init.clone();
    let mut means = vec![first.mean; k];
    let mut covs = vec![first.cov; k];
    if keep {
        steps.push(GenericStep {
            log_weights: log_w.clone(),
            means: means.clone(),
            covs: covs.clone(),
            predicted: &model.c * &model.init_mean,
            log_switch: Vec::new(),
            log_lik: first.log_lik,
        });
    }

    for (t, y) in ys.iter().enumerate().skip(1) {
        let y = lift_v(y);
        let a = actions.map(|a| a[t - 1]);
        let log_switch: Vec<Vec<T>> = (0..k).map(|i| model.rule.log_switch(i, &means[i], a)).collect();
        let prune: T = nalgebra::convert(PRUNE_LOG_MASS);
        let mut joint = vec![vec![T::min_value().unwrap_or(prune); k]; k];
        let mut live = vec![vec![false; k]; k];
        let mut comp_means = vec![Vec::with_capacity(k); k];
        let mut comp_covs = vec![Vec::with_capacity(k); k];
        let mut predicted = DVector::<T>::zeros(y.len());
        for i in 0..k {
            for j in 0..k {
                let prior_w = log_w[i] + log_switch[i][j];
                if prior_w < prune {
                    continue;
                }
                let pm = &model.f[j] * &means[i] + &model.u[j];
                let pc = symmetrise(&model.f[j] * &covs[i] * model.f[j].transpose() + &model.q[j]);
                predicted += &model.c * &pm * prior_w.exp();
                let up = kalman_update(pm, pc, &y, &model.c, &model.r, t)?;
                joint[i][j] = prior_w + up.log_lik;
                live[i][j] = true;
                comp_means[j].push(up.mean);
                comp_covs[j].push(up.cov);
            }
        }
        let flat: Vec<T> = (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .filter(|&(i, j)| live[i][j])
            .map(|(i, j)| joint[i][j])
            .collect();
        let total = log_sum_exp_t(&flat);
        log_evidence += total;
        let mut new_log_w = Vec::with_capacity(k);
        let mut new_means = Vec::with_capacity(k);
        let mut new_covs = Vec::with_capacity(k);
        for j in 0..k {
            let column: Vec<T> = (0..k).filter(|&i| live[i][j]).map(|i| joint[i][j]).collect();
            if column.is_empty() {
                // Negligible regime: carry its prediction from the heaviest
                // regime so later switch evaluations stay finite.
                let best = (0..k).max_by(|&a, &b| log_w[a].partial_cmp(&log_w[b]).unwrap_or(std::cmp::Ordering::Equal)).unwrap_or(0);
                new_log_w.push(T::min_value().unwrap_or(prune));
                new_means.push(&model.f[j] * &means[best] + &model.u[j]);
                new_covs.push(symmetrise(&model.f[j] * &covs[best] * model.f[j].transpose() + &model.q[j]));
                continue;
            }
            let lj = log_sum_exp_t(&column);
            new_log_w.push(lj - total);
            let weights: Vec<T> = column.iter().map(|&l| (l - lj).exp()).collect();
            let mut mean = DVector::<T>::zeros(means[0].len());
            for (w, m) in weights.iter().zip(&comp_means[j]) {
                mean += m * *w;
            }
            let mut cov = DMatrix::<T>::zeros(mean.len(), mean.len());
            for ((w, m), c) in weights.iter().zip(&comp_means[j]).zip(&comp_covs[j]) {
                let dm = m - &mean;
                cov += (c + &dm * dm.transpose()) * *w;
            }
            new_means.push(mean);
            new_covs.push(symmetrise(cov));
        }
        log_w = new_log_w;
        means = new_means;
        covs = new_covs;
        if keep {
            steps.push(GenericStep {
                log_weights: log_w.clone(),
                means: means.clone(),
                covs: covs.clone(),
                predicted,
                log_switch,
                log_lik: total,
            });
        }
    }
    Ok((log_evidence, steps))
}

fn check_observations(model: &RsldsModel, ys: &[DVector<f64>]) -> Result<()> {
    if ys.is_empty() {
        return Err(Error::InvalidValue("empty observation sequence".into()));
    }
    for y in ys {
        if y.len() != model.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.obs_dim(),
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterStep {
    pub regime: Categorical,
    /// Moment-matched Gaussian over the state (all regimes collapsed).
    pub state: GaussianBelief,
    /// Filtered Gaussian conditioned on each regime.
    pub components: Vec<GaussianBelief>,
    /// Predicted observation mean before `y_t` was seen.
    pub predicted_observation: DVector<f64>,
    /// `ln p(y_t | y_<t)`; these sum to the log-evidence.
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub steps: Vec<FilterStep>,
    pub log_evidence: f64,
}

/// Mixture moments of `(weight, mean, cov)` components.
fn collapse(weights: &[f64], means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = DVector::zeros(means[0].len());
    for (w, m) in weights.iter().zip(means) {
        mean += m * *w;
    }
    let mut cov = DMatrix::zeros(mean.len(), mean.len());
    for ((w, m), c) in weights.iter().zip(means).zip(covs) {
        let dm = m - &mean;
        cov += (c + &dm * dm.transpose()) * *w;
    }
    (mean, symmetrise(cov))
}

fn gaussian_unchecked(mean: DVector<f64>, covariance: DMatrix<f64>) -> GaussianBelief {
    GaussianBelief { mean, covariance }
}

pub fn filter(model: &RsldsModel, ys: &[DVector<f64>], actions: Option<&[usize]>) -> Result<FilterResult> {
    model.validate()?;
    check_observations(model, ys)?;
    check_actions(model, ys.len(), actions)?;
    let generic = GenericModel::<f64>::new(model, &model.rule.to_vec())?;
    let (log_evidence, steps) = run_filter(&generic, ys, actions, true)?;
    if !log_evidence.is_finite() {
        return Err(Error::NonFinite);
    }
    let steps = steps
        .into_iter()
        .map(|s| {
            let weights: Vec<f64> = s.log_weights.iter().map(|l| l.exp()).collect();
            let total: f64 = weights.iter().sum();
            let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let (mean, cov) = collapse(&weights, &s.means, &s.covs);
            FilterStep {
                regime: Categorical::new(weights).expect("normalised regime weights"),
                state: gaussian_unchecked(mean, cov),
                components: s
                    .means
                    .into_iter()
                    .zip(s.covs)
                    .map(|(m, c)| gaussian_unchecked(m, c))
                    .collect(),
                predicted_observation: s.predicted,
                log_likelihood: s.log_lik,
            }
        })
        .collect();
    Ok(FilterResult { steps, log_evidence })
}

/// Filter log-evidence summed over trajectories.
pub fn log_evidence(model: &RsldsModel, dataset: &[Vec<DVector<f64>>]) -> Result<f64> {
    model.validate()?;
    let generic = GenericModel::<f64>::new(model, &model.rule.to_vec())?;
    let mut total = 0.0;
    for ys in dataset {
        check_observations(model, ys)?;
        total += run_filter(&generic, ys, None, false)?.0;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(total)
}

const GRADIENT_CHUNK: usize = 8;

/// Exact gradient of the summed filter log-evidence with respect to the
/// flattened rule logits (see [`RecurrentRule::to_vec`]), by forward-mode
/// dual numbers in chunks of eight directions.
pub fn log_evidence_gradient(model: &RsldsModel, dataset: &[Vec<DVector<f64>>]) -> Result<(f64, Vec<f64>)> {
    use num_dual::DualSVec64;
    model.validate()?;
    for ys in dataset {
        check_observations(model, ys)?;
    }
    let theta = model.rule.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let mut value = f64::NAN;
    for start in (0..theta.len()).step_by(GRADIENT_CHUNK) {
        let seeded: Vec<DualSVec64<GRADIENT_CHUNK>> = theta
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let d = DualSVec64::<GRADIENT_CHUNK>::from_re(x);
                if i >= start && i < start + GRADIENT_CHUNK {
                    d.derivative(i - start)
                } else {
                    d
                }
            })
            .collect();
        let generic = GenericModel::new(model, &seeded)?;
        let mut total = DualSVec64::<GRADIENT_CHUNK>::from_re(0.0);
        for ys in dataset {
            total += run_filter(&generic, ys, None, false)?.0;
        }
        value = total.re;
        let eps = total.eps.unwrap_generic(nalgebra::Const::<GRADIENT_CHUNK>, nalgebra::U1);
        for (i, g) in grad.iter_mut().enumerate().skip(start).take(GRADIENT_CHUNK) {
            *g = eps[i - start];
        }
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok((value, grad))
}

/// Mean squared one-step-ahead prediction error per observation coordinate,
/// over steps `t ≥ 1` of every trajectory.
pub fn one_step_mse(model: &RsldsModel, dataset: &[Vec<DVector<f64>>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ys in dataset {
        let result = filter(model, ys, None)?;
        for (y, step) in ys.iter().zip(&result.steps).skip(1) {
            sum += (y - &step.predicted_observation).norm_squared();
            count += y.len();
        }
    }
    if count == 0 {
        return Err(Error::InvalidValue("no prediction steps".into()));
    }
    Ok(sum / count as f64)
}

fn filter_records(model: &RsldsModel, ys: &[DVector<f64>], actions: Option<&[usize]>) -> Result<(f64, Vec<GenericStep<f64>>)> {
    check_observations(model, ys)?;
    check_actions(model, ys.len(), actions)?;
    let generic = GenericModel::<f64>::new(model, &model.rule.to_vec())?;
    run_filter(&generic, ys, actions, true)
}

/// `a b⁻¹` for symmetric PSD `b`, falling back to a jittered or
/// pseudo-inverse when `b` is singular.
fn right_solve_psd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.nrows();
    let chol = Cholesky::new(b.clone()).or_else(|| Cholesky::new(b + DMatrix::identity(n, n) * JITTER));
    match chol {
        Some(ch) => ch.solve(&a.transpose()).transpose(),
        None => a * b.clone().pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(n, n)),
    }
}

/// Smoothed regime and state marginals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedPath {
    pub regime: Vec<Categorical>,
    pub state: Vec<GaussianBelief>,
}

/// Expected sufficient statistics gathered by the smoother.
#[derive(Clone, Debug)]
struct Stats {
    /// Per regime: weight, Σ E[x̃ x̃ᵀ], Σ E[x' x̃ᵀ], Σ E[x' x'ᵀ] with x̃ = [x; 1].
    regime_n: Vec<f64>,
    regime_xx: Vec<DMatrix<f64>>,
    regime_yx: Vec<DMatrix<f64>>,
    regime_yy: Vec<DMatrix<f64>>,
    emit_n: f64,
    emit_xx: DMatrix<f64>,
    emit_yx: DMatrix<f64>,
    emit_yy: DMatrix<f64>,
    init_n: f64,
    init_x: DVector<f64>,
    init_xx: DMatrix<f64>,
    init_regime: Vec<f64>,
    /// Smoothed `E[x_t]` with the pair posterior `ξ[j][k]` of `(z_t, z_{t+1})`.
    switches: Vec<SwitchRow>,
}

#[derive(Clone, Debug)]
struct SwitchRow {
    features: DVector<f64>,
    pairs: Vec<Vec<f64>>,
}

impl Stats {
    fn new(k: usize, d: usize, p: usize) -> Self {
        Self {
            regime_n: vec![0.0; k],
            regime_xx: vec![DMatrix::zeros(d + 1, d + 1); k],
            regime_yx: vec![DMatrix::zeros(d, d + 1); k],
            regime_yy: vec![DMatrix::zeros(d, d); k],
            emit_n: 0.0,
            emit_xx: DMatrix::zeros(d, d),
            emit_yx: DMatrix::zeros(p, d),
            emit_yy: DMatrix::zeros(p, p),
            init_n: 0.0,
            init_x: DVector::zeros(d),
            init_xx: DMatrix::zeros(d, d),
            init_regime: vec![0.0; k],
            switches: Vec::new(),
        }
    }

    fn add_emission(&mut self, y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) {
        self.emit_n += 1.0;
        self.emit_xx += cov + mean * mean.transpose();
        self.emit_yx += y * mean.transpose();
        self.emit_yy += y * y.transpose();
    }
}

fn augment(mean: &DVector<f64>) -> DVector<f64> {
    let d = mean.len();
    DVector::from_fn(d + 1, |i, _| if i < d { mean[i] } else { 1.0 })
}

/// Backward pass over stored filter records (Kim's approximation; exact
/// Rauch-Tung-Striebel smoothing when K = 1). Optionally accumulates EM
/// statistics.
fn smooth_records(
    regimes: &[DiscreteRegime],
    records: &[GenericStep<f64>],
    ys: &[DVector<f64>],
    mut stats: Option<&mut Stats>,
) -> SmoothedPath {
    let k = regimes.len();
    let horizon = records.len();
    let d = records[0].means[0].len();
    let weights = |s: &GenericStep<f64>| -> Vec<f64> {
        let w: Vec<f64> = s.log_weights.iter().map(|l| l.exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    };
    let last = &records[horizon - 1];
    let mut ps = weights(last);
    let mut ms = last.means.clone();
    let mut pss = last.covs.clone();
    let mut out_regime = vec![Categorical::uniform(k); horizon];
    let mut out_state = vec![gaussian_unchecked(DVector::zeros(d), DMatrix::zeros(d, d)); horizon];
    let record = |t: usize, ps: &[f64], ms: &[DVector<f64>], pss: &[DMatrix<f64>], stats: &mut Option<&mut Stats>| {
        let (mean, cov) = collapse(ps, ms, pss);
        if let Some(s) = stats.as_deref_mut() {
            s.add_emission(&ys[t], &mean, &cov);
            if t == 0 {
                s.init_n += 1.0;
                s.init_x += &mean;
                s.init_xx += &cov + &mean * mean.transpose();
                for (acc, p) in s.init_regime.iter_mut().zip(ps) {
                    *acc += p;
                }
            }
        }
        (mean, cov)
    };
    let (mean, cov) = record(horizon - 1, &ps, &ms, &pss, &mut stats);
    out_regime[horizon - 1] = Categorical::new(ps.clone()).unwrap_or_else(|_| Categorical::uniform(k));
    out_state[horizon - 1] = gaussian_unchecked(mean, cov);

    for t in (0..horizon - 1).rev() {
        let w = weights(&records[t]);
        let switch = &records[t + 1].log_switch;
        let mut pred = vec![0.0; k];
        for j in 0..k {
            for kk in 0..k {
                pred[kk] += w[j] * switch[j][kk].exp();
            }
        }
        let mut new_ps = vec![0.0; k];
        let mut pair_w = vec![vec![0.0; k]; k];
        let mut pair_m = vec![Vec::with_capacity(k); k];
        let mut pair_c = vec![Vec::with_capacity(k); k];
        for j in 0..k {
            let mu = &records[t].means[j];
            let cov = &records[t].covs[j];
            for kk in 0..k {
                let xi = if pred[kk] > 0.0 {
                    ps[kk] * w[j] * switch[j][kk].exp() / pred[kk]
                } else {
                    0.0
                };
                pair_w[j][kk] = xi;
                new_ps[j] += xi;
                if xi == 0.0 {
                    pair_m[j].push(mu.clone());
                    pair_c[j].push(cov.clone());
                    continue;
                }
                let r = &regimes[kk];
                let pm = &r.transition * mu + &r.offset;
                let pc = symmetrise(&r.transition * cov * r.transition.transpose() + &r.noise);
                let gain = right_solve_psd(&(cov * r.transition.transpose()), &pc);
                let sm = mu + &gain * (&ms[kk] - &pm);
                let sc = symmetrise(cov + &gain * (&pss[kk] - &pc) * gain.transpose());
                if let Some(s) = stats.as_deref_mut() {
                    if xi > 0.0 {
                        let cross = &pss[kk] * gain.transpose();
                        let xt = augment(&sm);
                        let mut exx = &xt * xt.transpose();
                        exx.view_mut((0, 0), (d, d)).add_assign(&sc);
                        let mut eyx = &ms[kk] * xt.transpose();
                        eyx.view_mut((0, 0), (d, d)).add_assign(&cross);
                        s.regime_n[kk] += xi;
                        s.regime_xx[kk] += exx * xi;
                        s.regime_yx[kk] += eyx * xi;
                        s.regime_yy[kk] += (&pss[kk] + &ms[kk] * ms[kk].transpose()) * xi;
                    }
                }
                pair_m[j].push(sm);
                pair_c[j].push(sc);
            }
        }
        let mut new_ms = Vec::with_capacity(k);
        let mut new_pss = Vec::with_capacity(k);
        for j in 0..k {
            if new_ps[j] > 0.0 {
                let rel: Vec<f64> = pair_w[j].iter().map(|x| x / new_ps[j]).collect();
                let (m, c) = collapse(&rel, &pair_m[j], &pair_c[j]);
                new_ms.push(m);
                new_pss.push(c);
            } else {
                new_ms.push(records[t].means[j].clone());
                new_pss.push(records[t].covs[j].clone());
            }
        }
        let total: f64 = new_ps.iter().sum();
        ps = new_ps.iter().map(|x| x / total).collect();
        ms = new_ms;
        pss = new_pss;
        let (mean, cov) = record(t, &ps, &ms, &pss, &mut stats);
        if let Some(s) = stats.as_deref_mut() {
            s.switches.push(SwitchRow {
                features: mean.clone(),
                pairs: pair_w,
            });
        }
        out_regime[t] = Categorical::new(ps.clone()).unwrap_or_else(|_| Categorical::uniform(k));
        out_state[t] = gaussian_unchecked(mean, cov);
    }
    SmoothedPath {
        regime: out_regime,
        state: out_state,
    }
}

pub fn smooth(model: &RsldsModel, ys: &[DVector<f64>], actions: Option<&[usize]>) -> Result<SmoothedPath> {
    model.validate()?;
    let (_, records) = filter_records(model, ys, actions)?;
    Ok(smooth_records(&model.discretised()?, &records, ys, None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub iterations: usize,
    pub learn_emission: bool,
    pub learn_rule: bool,
    /// Extra gradient-ascent steps on all rule logits per iteration, after
    /// the closed-form M-step.
    pub rule_steps: usize,
    /// Ridge penalty of the recurrent-weight M-step.
    pub rule_ridge: f64,
    /// Stop once an iteration gains less than this much log-evidence.
    pub tolerance: f64,
    /// Floor added to fitted noise covariances.
    pub noise_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 20,
            learn_emission: true,
            learn_rule: true,
            rule_steps: 0,
            rule_ridge: 1e-6,
            tolerance: 1e-6,
            noise_floor: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: RsldsModel,
    /// Summed filter log-evidence: the initial value, then one entry per iteration.
    pub trace: Vec<f64>,
}

fn floor_psd(m: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrise(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    symmetrise(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()) + DMatrix::identity(n, n) * floor
}

fn m_step(model: &RsldsModel, stats: &Stats, options: &FitOptions) -> Result<RsldsModel> {
    let d = model.state_dim();
    let mut out = model.clone();
    for (k, regime) in out.regimes.iter_mut().enumerate() {
        let n = stats.regime_n[k];
        if n < (d + 2) as f64 {
            continue;
        }
        let sxx = &stats.regime_xx[k] + DMatrix::identity(d + 1, d + 1) * (1e-9 * n);
        let Some(g) = Cholesky::new(sxx.clone()).map(|ch| ch.solve(&stats.regime_yx[k].transpose()).transpose()) else {
            continue;
        };
        let noise = (&stats.regime_yy[k] - &g * stats.regime_yx[k].transpose() - &stats.regime_yx[k] * g.transpose()
            + &g * &stats.regime_xx[k] * g.transpose())
            / n;
        let fitted = DiscreteRegime {
            transition: g.columns(0, d).into_owned(),
            offset: g.column(d).into_owned(),
            noise: floor_psd(noise, options.noise_floor),
        };
        if fitted.transition.iter().chain(fitted.offset.iter()).any(|x| !x.is_finite()) {
            continue;
        }
        *regime = continuous_from_discrete(&fitted, model.dt);
    }
    if options.learn_emission && stats.emit_n > 0.0 {
        let sxx = &stats.emit_xx + DMatrix::identity(d, d) * (1e-9 * stats.emit_n);
        if let Some(ch) = Cholesky::new(sxx) {
            let c = ch.solve(&stats.emit_yx.transpose()).transpose();
            let r = (&stats.emit_yy - &c * stats.emit_yx.transpose() - &stats.emit_yx * c.transpose()
                + &c * &stats.emit_xx * c.transpose())
                / stats.emit_n;
            if c.iter().all(|x| x.is_finite()) {
                out.emission = EmissionModel {
                    c,
                    r: floor_psd(r, options.noise_floor),
                };
            }
        }
    }
    if options.learn_rule && model.num_regimes() > 1 && !stats.switches.is_empty() {
        let (w, r) = fit_switching(&stats.switches, &model.rule.markov_logits, options.rule_ridge);
        if w.iter().chain(r.iter()).all(|x| x.is_finite()) {
            out.rule.recurrent_w = w;
            out.rule.recurrent_r = r;
        }
    }
    if stats.init_n > 0.0 {
        let mean = &stats.init_x / stats.init_n;
        let cov = &stats.init_xx / stats.init_n - &mean * mean.transpose();
        out.initial_state = gaussian_unchecked(mean, floor_psd(cov, options.noise_floor.max(1e-12)));
        let total: f64 = stats.init_regime.iter().sum();
        if total > 0.0 {
            let probs: Vec<f64> = stats.init_regime.iter().map(|p| (p / total).max(1e-12)).collect();
            let s: f64 = probs.iter().sum();
            out.initial_regime = Categorical::new(probs.iter().map(|p| p / s).collect())?;
        }
    }
    Ok(out)
}

/// Convex combination `(1 − α) a + α b` of two models with equal structure.
fn interpolate(a: &RsldsModel, b: &RsldsModel, alpha: f64) -> RsldsModel {
    let mix_m = |x: &DMatrix<f64>, y: &DMatrix<f64>| x * (1.0 - alpha) + y * alpha;
    let mix_v = |x: &DVector<f64>, y: &DVector<f64>| x * (1.0 - alpha) + y * alpha;
    let regimes = a
        .regimes
        .iter()
        .zip(&b.regimes)
        .map(|(x, y)| RegimeParams {
            drift: mix_m(&x.drift, &y.drift),
            bias: mix_v(&x.bias, &y.bias),
            volatility: mix_m(&x.volatility, &y.volatility),
        })
        .collect();
    let probs: Vec<f64> = a
        .initial_regime
        .probs()
        .iter()
        .zip(b.initial_regime.probs())
        .map(|(x, y)| x * (1.0 - alpha) + y * alpha)
        .collect();
    RsldsModel {
        regimes,
        rule: a.rule.with_vec(
            &a.rule
                .to_vec()
                .iter()
                .zip(b.rule.to_vec())
                .map(|(x, y)| x * (1.0 - alpha) + y * alpha)
                .collect::<Vec<_>>(),
        ),
        emission: EmissionModel {
            c: mix_m(&a.emission.c, &b.emission.c),
            r: mix_m(&a.emission.r, &b.emission.r),
        },
        dt: a.dt,
        initial_regime: Categorical::new(probs).unwrap_or_else(|_| a.initial_regime.clone()),
        initial_state: gaussian_unchecked(
            mix_v(&a.initial_state.mean, &b.initial_state.mean),
            mix_m(&a.initial_state.covariance, &b.initial_state.covariance),
        ),
    }
}

fn objective(model: &RsldsModel, dataset: &[Vec<DVector<f64>>]) -> f64 {
    log_evidence(model, dataset).unwrap_or(f64::NEG_INFINITY)
}

/// EM-style fitting. Each iteration runs the switching smoother, refits
/// regime dynamics, emission and initial state by weighted least squares,
/// then takes gradient steps on the rule logits. Any candidate that lowers
/// the filter log-evidence is shrunk towards the current model or rejected,
/// so the trace never decreases.
pub fn fit_em(init: &RsldsModel, dataset: &[Vec<DVector<f64>>], options: &FitOptions) -> Result<FitResult> {
    init.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidValue("no trajectories".into()));
    }
    let mut model = init.clone();
    let mut current = log_evidence(&model, dataset)?;
    let mut trace = vec![current];
    let mut step_size = 1e-3;
    for _ in 0..options.iterations {
        let regimes = model.discretised()?;
        let mut stats = Stats::new(model.num_regimes(), model.state_dim(), model.obs_dim());
        for ys in dataset {
            let (_, records) = filter_records(&model, ys, None)?;
            smooth_records(&regimes, &records, ys, Some(&mut stats));
        }
        let proposal = m_step(&model, &stats, options)?;
        let mut alpha = 1.0;
        for _ in 0..8 {
            let candidate = if alpha == 1.0 {
                proposal.clone()
            } else {
                interpolate(&model, &proposal, alpha)
            };
            let value = objective(&candidate, dataset);
            if value.is_finite() && value >= current {
                model = candidate;
                current = value;
                break;
            }
            alpha *= 0.5;
        }

        if options.learn_rule && model.num_regimes() > 1 {
            for _ in 0..options.rule_steps {
                let (_, grad) = log_evidence_gradient(&model, dataset)?;
                let theta = model.rule.to_vec();
                let mut accepted = false;
                for _ in 0..12 {
                    let moved: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step_size * g).collect();
                    let candidate = RsldsModel {
                        rule: model.rule.with_vec(&moved),
                        ..model.clone()
                    };
                    let value = objective(&candidate, dataset);
                    if value.is_finite() && value > current {
                        model = candidate;
                        current = value;
                        step_size *= 2.0;
                        accepted = true;
                        break;
                    }
                    step_size *= 0.25;
                }
                if !accepted {
                    step_size = step_size.max(1e-8);
                    break;
                }
            }
        }
        if !current.is_finite() {
            return Err(Error::FitDiverged("non-finite log-evidence".into()));
        }
        let gain = current - trace[trace.len() - 1];
        trace.push(current);
        if gain < options.tolerance || gain == 0.0 {
            break;
        }
    }
    Ok(FitResult { model, trace })
}

/// Random-walk (`order` = 0) or kinematic chain (`order` ≥ 1) prior over
/// `p`-dimensional observations: state holds position and `order`
/// derivatives, the emission reads the position block.
pub fn kinematic_model(p: usize, order: usize, dt: f64, volatility: f64, obs_noise: f64) -> Result<RsldsModel> {
    if order > MAX_GENERALISED_ORDER {
        return Err(Error::DepthExceeded {
            depth: order,
            max: MAX_GENERALISED_ORDER,
        });
    }
    let d = p * (order + 1);
    let mut drift = DMatrix::zeros(d, d);
    for k in 0..order {
        drift.view_mut((k * p, (k + 1) * p), (p, p)).fill_diagonal(1.0);
    }
    let mut vol = DMatrix::zeros(d, d);
    vol.view_mut((order * p, order * p), (p, p)).fill_diagonal(volatility);
    let mut c = DMatrix::zeros(p, d);
    c.view_mut((0, 0), (p, p)).fill_diagonal(1.0);
    RsldsModel::linear(
        RegimeParams {
            drift,
            bias: DVector::zeros(d),
            volatility: vol,
        },
        EmissionModel {
            c,
            r: DMatrix::identity(p, p) * obs_noise,
        },
        dt,
        GaussianBelief::new(DVector::zeros(d), DMatrix::identity(d, d))?,
    )
}

/// Fits a K-regime model seeded by [`init_from_data`]. A run that converges
/// within `restart_window` iterations is treated as a poor initialisation
/// and retried with the next clustering seed, up to `restarts` attempts; the
/// attempt with the highest log-evidence is returned.
pub fn fit_from_data(
    base: &RsldsModel,
    k: usize,
    dataset: &[Vec<DVector<f64>>],
    options: &FitOptions,
    restarts: usize,
    restart_window: usize,
    seed: u64,
) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    for attempt in 0..restarts.max(1) {
        let init = init_from_data(base, k, dataset, seed.wrapping_add(attempt as u64))?;
        let fit = fit_em(&init, dataset, options)?;
        let stalled = fit.trace.len() <= restart_window;
        let better = best
            .as_ref()
            .is_none_or(|b| fit.trace.last().copied().unwrap_or(f64::NEG_INFINITY) > b.trace.last().copied().unwrap_or(f64::NEG_INFINITY));
        if better {
            best = Some(fit);
        }
        if !stalled || k == 1 {
            break;
        }
    }
    Ok(best.expect("at least one attempt"))
}

/// Smallest `l` such that `[C; CF; …; CF^l]` has full column rank, or the
/// state dimension when the pair is not observable.
fn observability_lag(f: &DMatrix<f64>, c: &DMatrix<f64>) -> usize {
    let d = f.nrows();
    let mut stacked = c.clone();
    let mut block = c.clone();
    for l in 0..d {
        if stacked.clone().svd(false, false).rank(1e-9 * stacked.norm().max(1.0)) == d {
            return l;
        }
        block = &block * f;
        let rows = stacked.nrows();
        stacked = stacked.insert_rows(rows, block.nrows(), 0.0);
        stacked.rows_mut(rows, block.nrows()).copy_from(&block);
    }
    d
}

/// `E[x_t | y_0..y_{t+lag}]` under a single-regime model. Unlike full
/// smoothing this does not spread abrupt changes over neighbouring steps.
fn fixed_lag_means(model: &RsldsModel, ys: &[DVector<f64>], lag: usize) -> Result<Vec<DVector<f64>>> {
    let steps = filter(model, ys, None)?.steps;
    let r = &model.discretised()?[0];
    let horizon = ys.len();
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let end = (t + lag).min(horizon - 1);
        let mut mean = steps[end].components[0].mean.clone();
        let mut cov = steps[end].components[0].covariance.clone();
        for s in (t..end).rev() {
            let fm = &steps[s].components[0].mean;
            let fc = &steps[s].components[0].covariance;
            let pm = &r.transition * fm + &r.offset;
            let pc = symmetrise(&r.transition * fc * r.transition.transpose() + &r.noise);
            let gain = right_solve_psd(&(fc * r.transition.transpose()), &pc);
            mean = fm + &gain * (&mean - pm);
            cov = symmetrise(fc + &gain * (&cov - &pc) * gain.transpose());
        }
        out.push(mean);
    }
    Ok(out)
}

/// Seeds a K-regime model from a fitted single-regime `base`. States are
/// estimated with the shortest smoothing lag that makes them observable;
/// outlying one-step residuals are clustered into the extra regimes, each
/// cluster gets its own least-squares dynamics, and the rule is a
/// multinomial logistic regression of labels on the preceding state.
pub fn init_from_data(base: &RsldsModel, k: usize, dataset: &[Vec<DVector<f64>>], seed: u64) -> Result<RsldsModel> {
    base.validate()?;
    if base.num_regimes() != 1 {
        return Err(Error::InvalidModel("base model must have a single regime".into()));
    }
    if k == 0 {
        return Err(Error::InvalidValue("k must be positive".into()));
    }
    let d = base.state_dim();
    let regime = &base.discretised()?[0];
    let mut prev = Vec::new();
    let mut next = Vec::new();
    let mut starts = Vec::new();
    let lag = observability_lag(&regime.transition, &base.emission.c);
    for ys in dataset {
        starts.push(prev.len());
        let path = fixed_lag_means(base, ys, lag)?;
        for w in path.windows(2) {
            prev.push(w[0].clone());
            next.push(w[1].clone());
        }
    }
    if prev.len() < k {
        return Err(Error::InvalidValue("not enough transitions to initialise".into()));
    }
    let residuals: Vec<DVector<f64>> = prev
        .iter()
        .zip(&next)
        .map(|(x, y)| y - (&regime.transition * x + &regime.offset))
        .collect();
    let labels = label_transitions(&residuals, &starts, k, seed);

    let mut regimes = Vec::with_capacity(k);
    for c in 0..k {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < d + 2 {
            regimes.push(base.regimes[0].clone());
            continue;
        }
        let mut sxx = DMatrix::identity(d + 1, d + 1) * 1e-9;
        let mut syx = DMatrix::zeros(d, d + 1);
        for &i in &idx {
            let xt = augment(&prev[i]);
            sxx += &xt * xt.transpose();
            syx += &next[i] * xt.transpose();
        }
        let g = match Cholesky::new(sxx) {
            Some(ch) => ch.solve(&syx.transpose()).transpose(),
            None => {
                regimes.push(base.regimes[0].clone());
                continue;
            }
        };
        let mut noise = DMatrix::zeros(d, d);
        for &i in &idx {
            let e = &next[i] - &g * augment(&prev[i]);
            noise += &e * e.transpose();
        }
        noise /= idx.len() as f64;
        let fitted = DiscreteRegime {
            transition: g.columns(0, d).into_owned(),
            offset: g.column(d).into_owned(),
            noise: floor_psd(noise + &regime.noise, 1e-10),
        };
        regimes.push(continuous_from_discrete(&fitted, base.dt));
    }
    let rows: Vec<SwitchRow> = prev
        .iter()
        .zip(&labels)
        .map(|(x, &label)| {
            let mut pairs = vec![vec![0.0; k]; k];
            pairs[0][label] = 1.0;
            SwitchRow {
                features: x.clone(),
                pairs,
            }
        })
        .collect();
    let (w, r) = fit_switching(&rows, &DMatrix::zeros(k, k), 1e-6);
    let model = RsldsModel {
        regimes,
        rule: RecurrentRule {
            markov_logits: DMatrix::zeros(k, k),
            recurrent_w: w,
            recurrent_r: r,
            action_logits: None,
        },
        emission: base.emission.clone(),
        dt: base.dt,
        initial_regime: Categorical::uniform(k),
        initial_state: base.initial_state.clone(),
    };
    model.validate()?;
    Ok(model)
}

/// Regime 0 takes the bulk of the transitions; the rest are outliers of a
/// trimmed Gaussian fit to the residuals, clustered by k-means. A run of
/// consecutive outliers within one trajectory counts as a single event at
/// its most surprising step. Falls back to k-means on everything when there
/// are too few outliers.
fn label_transitions(residuals: &[DVector<f64>], starts: &[usize], k: usize, seed: u64) -> Vec<usize> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if k == 1 {
        return vec![0; residuals.len()];
    }
    let d = residuals[0].len();
    let chi = ChiSquared::new(d as f64).expect("positive degrees of freedom");
    let trim = chi.inverse_cdf(0.99);
    let cutoff = chi.inverse_cdf(0.999);
    let mut inlier = vec![true; residuals.len()];
    let mut distances = vec![0.0; residuals.len()];
    let mut whitener = None;
    let mut centre = DVector::zeros(d);
    for _ in 0..10 {
        let kept: Vec<&DVector<f64>> = residuals.iter().zip(&inlier).filter(|(_, &i)| i).map(|(r, _)| r).collect();
        if kept.len() <= d {
            break;
        }
        let n = kept.len() as f64;
        let mean = kept.iter().fold(DVector::zeros(d), |acc, r| acc + *r) / n;
        let cov = kept.iter().fold(DMatrix::zeros(d, d), |acc, r| acc + (*r - &mean) * (*r - &mean).transpose()) / n
            + DMatrix::identity(d, d) * 1e-18;
        let Some(ch) = Cholesky::new(cov) else { break };
        for (dist, r) in distances.iter_mut().zip(residuals) {
            let e = r - &mean;
            *dist = e.dot(&ch.solve(&e));
        }
        whitener = Some(ch);
        centre = mean;
        let next: Vec<bool> = distances.iter().map(|&m| m <= trim).collect();
        if next == inlier {
            break;
        }
        inlier = next;
    }
    let mut outliers = Vec::new();
    let mut i = 0;
    while i < residuals.len() {
        if distances[i] <= cutoff {
            i += 1;
            continue;
        }
        let mut best = i;
        let mut j = i + 1;
        while j < residuals.len() && distances[j] > cutoff && !starts.contains(&j) {
            if distances[j] > distances[best] {
                best = j;
            }
            j += 1;
        }
        outliers.push(best);
        i = j;
    }
    if outliers.len() < 2 * (k - 1) {
        return kmeans(residuals, k, seed);
    }
    // Cluster directions in whitened units; magnitudes vary within a regime.
    let points: Vec<DVector<f64>> = outliers
        .iter()
        .map(|&i| {
            let white = match &whitener {
                Some(ch) => ch.l().solve_lower_triangular(&(&residuals[i] - &centre)).unwrap_or_else(|| residuals[i].clone()),
                None => residuals[i].clone(),
            };
            let norm = white.norm();
            if norm > 0.0 {
                white / norm
            } else {
                white
            }
        })
        .collect();
    let sub = kmeans(&points, k - 1, seed);
    let mut labels = vec![0; residuals.len()];
    for (&i, &l) in outliers.iter().zip(&sub) {
        labels[i] = l + 1;
    }
    labels
}

/// Lloyd's algorithm with k-means++ seeding; deterministic given `seed`.
fn kmeans(points: &[DVector<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = vec![points[rand::Rng::random_range(&mut rng, 0..points.len())].clone()];
    while centres.len() < k {
        let dist: Vec<f64> = points
            .iter()
            .map(|p| centres.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = dist.iter().sum();
        if total == 0.0 {
            centres.push(points[centres.len() % points.len()].clone());
            continue;
        }
        centres.push(points[sample_index(dist.iter().map(|x| x / total), &mut rng)].clone());
    }
    let mut labels = vec![0; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| (p - &centres[a]).norm_squared().total_cmp(&(p - &centres[b]).norm_squared()))
                .expect("k > 0");
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                *centre = members.iter().fold(DVector::zeros(points[0].len()), |acc, p| acc + *p) / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Weighted multinomial logistic regression of the next regime on the
/// current state, with the Markov logits as fixed offsets. Newton ascent on
/// standardised features with a ridge of `ridge` per row; returns `(W, r)`
/// in raw units.
fn fit_switching(rows: &[SwitchRow], markov: &DMatrix<f64>, ridge: f64) -> (DMatrix<f64>, DVector<f64>) {
    let k = markov.nrows();
    let d = rows[0].features.len();
    let n = rows.len() as f64;
    let mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + &r.features) / n;
    let scale = DVector::from_fn(d, |i, _| {
        let v = rows.iter().map(|r| (r.features[i] - mean[i]).powi(2)).sum::<f64>() / n;
        if v > 1e-24 {
            v.sqrt()
        } else {
            1.0
        }
    });
    // Previous regimes with identical Markov rows share one softmax.
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for j in 0..k {
        let row: Vec<f64> = markov.row(j).iter().copied().collect();
        match groups.iter_mut().find(|(r, _)| *r == row) {
            Some((_, members)) => members.push(j),
            None => groups.push((row, vec![j])),
        }
    }
    let m = d + 1;
    let data: Vec<(DVector<f64>, Vec<(usize, Vec<f64>, f64)>)> = rows
        .iter()
        .map(|r| {
            let z = DVector::from_fn(m, |i, _| if i < d { (r.features[i] - mean[i]) / scale[i] } else { 1.0 });
            let targets = groups
                .iter()
                .enumerate()
                .filter_map(|(g, (_, members))| {
                    let y: Vec<f64> = (0..k).map(|c| members.iter().map(|&j| r.pairs[j][c]).sum()).collect();
                    let w: f64 = y.iter().sum();
                    (w > 0.0).then_some((g, y, w))
                })
                .collect();
            (z, targets)
        })
        .collect();
    let lambda = ridge * n;
    let logits_of = |theta: &DVector<f64>, z: &DVector<f64>, g: usize| -> Vec<f64> {
        (0..k).map(|c| groups[g].0[c] + theta.rows(c * m, m).dot(z)).collect()
    };
    let objective = |theta: &DVector<f64>| -> f64 {
        let mut total = -0.5 * lambda * theta.norm_squared();
        for (z, targets) in &data {
            for (g, y, _) in targets {
                let logits = logits_of(theta, z, *g);
                let lse = crate::beliefs::log_sum_exp(&logits);
                total += y.iter().zip(&logits).map(|(yc, l)| yc * (l - lse)).sum::<f64>();
            }
        }
        total
    };
    let dim = k * m;
    let mut theta = DVector::zeros(dim);
    let mut current = objective(&theta);
    for _ in 0..25 {
        let mut grad = -&theta * lambda;
        let mut neg_hess = DMatrix::identity(dim, dim) * lambda;
        let mut block = DMatrix::<f64>::zeros(k, k);
        for (z, targets) in &data {
            block.fill(0.0);
            for (g, y, w) in targets {
                let p = crate::beliefs::softmax_unchecked(&logits_of(&theta, z, *g), 1.0);
                for a in 0..k {
                    grad.rows_mut(a * m, m).axpy(y[a] - w * p[a], z, 1.0);
                    for b in 0..k {
                        block[(a, b)] += w * (if a == b { p[a] } else { 0.0 } - p[a] * p[b]);
                    }
                }
            }
            for a in 0..k {
                for b in 0..=a {
                    let h = block[(a, b)];
                    if h == 0.0 {
                        continue;
                    }
                    for u in 0..m {
                        for v in 0..m {
                            neg_hess[(a * m + u, b * m + v)] += h * z[u] * z[v];
                        }
                    }
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                for u in 0..m {
                    for v in 0..m {
                        neg_hess[(b * m + v, a * m + u)] = neg_hess[(a * m + u, b * m + v)];
                    }
                }
            }
        }
        let Some(ch) = Cholesky::new(neg_hess) else { break };
        let step = ch.solve(&grad);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let candidate = &theta + &step * t;
            let value = objective(&candidate);
            if value > current {
                theta = candidate;
                improved = value - current > 1e-10 * current.abs().max(1.0);
                current = value;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let mut w = DMatrix::zeros(k, d);
    let mut r = DVector::zeros(k);
    for c in 0..k {
        r[c] = theta[c * m + d];
        for i in 0..d {
            w[(c, i)] = theta[c * m + i] / scale[i];
            r[c] -= theta[c * m + i] * mean[i] / scale[i];
        }
    }
    (w, r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralisedConfig {
    pub order: usize,
    /// Correlation length of the driving noise (time units).
    pub smoothness: f64,
}

/// Augments the state with `order` derivative blocks. Lower orders
/// integrate the next order; the original drift, a damping of 1/smoothness
/// and the (rescaled) noise act on the highest order; the emission reads
/// order 0 and the recurrent weights ignore the new blocks.
pub fn embed_generalised(model: &RsldsModel, cfg: GeneralisedConfig) -> Result<RsldsModel> {
    model.validate()?;
    if cfg.order > MAX_GENERALISED_ORDER {
        return Err(Error::DepthExceeded {
            depth: cfg.order,
            max: MAX_GENERALISED_ORDER,
        });
    }
    if !(cfg.smoothness > 0.0) {
        return Err(Error::InvalidValue(format!("smoothness {}", cfg.smoothness)));
    }
    if cfg.order == 0 {
        return Ok(model.clone());
    }
    let n = cfg.order;
    let d = model.state_dim();
    let big = d * (n + 1);
    let top = n * d;
    let damping = 1.0 / cfg.smoothness;
    // Long-run diffusion of order 0 is preserved for n = 1 when the top-level
    // noise is divided by s²; higher orders repeat the factor per order.
    let noise_scale = damping.powi(2 * n as i32);
    let regimes = model
        .regimes
        .iter()
        .map(|r| {
            let mut drift = DMatrix::zeros(big, big);
            for k in 0..n {
                drift.view_mut((k * d, (k + 1) * d), (d, d)).fill_diagonal(1.0);
            }
            let mut top_block = r.drift.clone();
            for i in 0..d {
                top_block[(i, i)] -= damping;
            }
            drift.view_mut((top, top), (d, d)).copy_from(&top_block);
            let mut bias = DVector::zeros(big);
            bias.rows_mut(top, d).copy_from(&r.bias);
            let mut vol = DMatrix::zeros(big, big);
            vol.view_mut((top, top), (d, d)).copy_from(&(&r.volatility * noise_scale));
            RegimeParams {
                drift,
                bias,
                volatility: vol,
            }
        })
        .collect();
    let k = model.num_regimes();
    let mut w = DMatrix::zeros(k, big);
    w.view_mut((0, 0), (k, d)).copy_from(&model.rule.recurrent_w);
    let mut c = DMatrix::zeros(model.obs_dim(), big);
    c.view_mut((0, 0), (model.obs_dim(), d)).copy_from(&model.emission.c);
    let mut mean = DVector::zeros(big);
    mean.rows_mut(0, d).copy_from(&model.initial_state.mean);
    let mut cov = DMatrix::zeros(big, big);
    for k in 0..=n {
        cov.view_mut((k * d, k * d), (d, d)).copy_from(&model.initial_state.covariance);
    }
    let out = RsldsModel {
        regimes,
        rule: RecurrentRule {
            recurrent_w: w,
            ..model.rule.clone()
        },
        emission: EmissionModel {
            c,
            r: model.emission.r.clone(),
        },
        dt: model.dt,
        initial_regime: model.initial_regime.clone(),
        initial_state: gaussian_unchecked(mean, cov),
    };
    out.validate()?;
    Ok(out)
}

/// Observation trajectory as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFile {
    pub dt: f64,
    pub observations: Vec<DVector<f64>>,
    /// Diagnostic regime labels; never used for fitting.
    pub regimes: Option<Vec<usize>>,
}

impl TrajectoryFile {
    /// Header `# dim=<p> steps=<T> dt=<dt>`, then one comma-separated row per
    /// step with an optional trailing integer regime label.
    pub fn to_text(&self) -> String {
        let p = self.observations.first().map_or(0, |y| y.len());
        let mut out = format!("# dim={p} steps={} dt={}\n", self.observations.len(), self.dt);
        for (t, y) in self.observations.iter().enumerate() {
            let mut row: Vec<String> = y.iter().map(|v| format!("{v:?}")).collect();
            if let Some(z) = &self.regimes {
                row.push(z[t].to_string());
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Serialisation("empty trajectory file".into()))?;
        let field = |name: &str| -> Result<&str> {
            header
                .trim_start_matches('#')
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(name).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| Error::Serialisation(format!("header lacks {name}")))
        };
        let parse_err = |e: &dyn std::fmt::Display| Error::Serialisation(format!("header: {e}"));
        let p: usize = field("dim")?.parse().map_err(|e| parse_err(&e))?;
        let steps: usize = field("steps")?.parse().map_err(|e| parse_err(&e))?;
        let dt: f64 = field("dt")?.parse().map_err(|e| parse_err(&e))?;
        let mut observations = Vec::with_capacity(steps);
        let mut regimes = Vec::new();
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != p && cells.len() != p + 1 {
                return Err(Error::Serialisation(format!("row {i} has {} columns, expected {p}", cells.len())));
            }
            let values = cells[..p]
                .iter()
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Serialisation(format!("row {i}: {e}")))?;
            observations.push(DVector::from_vec(values));
            if cells.len() == p + 1 {
                regimes.push(cells[p].parse::<usize>().map_err(|e| Error::Serialisation(format!("row {i}: {e}")))?);
            }
        }
        if observations.len() != steps {
            return Err(Error::Serialisation(format!("header says {steps} steps, found {}", observations.len())));
        }
        if !regimes.is_empty() && regimes.len() != steps {
            return Err(Error::Serialisation("regime labels on some rows only".into()));
        }
        Ok(Self {
            dt,
            observations,
            regimes: if regimes.is_empty() { None } else { Some(regimes) },
        })
    }
}
