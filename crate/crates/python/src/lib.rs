//! Python bindings: discrete layers (sampling, inference, planning), rsLDS
//! models, the two environments and the experiment harness.

use std::path::Path;

use nalgebra::DVector;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use worldkit_core::discrete::{sample_trajectory, DiscreteLayerModel, DiscreteLayerSpec};
use worldkit_core::envs::pool::{self, PoolConfig, PoolTableEnv};
use worldkit_core::envs::tmaze::{self, Arm, TMazeEnv};
use worldkit_core::harness::{self, ExperimentConfig, HarnessError};
use worldkit_core::inference::{exact_posterior_oracle, infer_states, Obs};
use worldkit_core::planning::{plan, DEFAULT_PRECISION};
use worldkit_core::rslds::{self, FitOptions, RsldsModel};

fn value_error(e: worldkit_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_error(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// `None` entries are missing observations.
fn to_obs(rows: Vec<Vec<Option<usize>>>) -> Vec<Vec<Obs>> {
    rows.into_iter()
        .map(|row| row.into_iter().map(|o| o.map_or(Obs::Missing, Obs::Outcome)).collect())
        .collect()
}

fn to_vectors(rows: Vec<Vec<f64>>) -> Vec<DVector<f64>> {
    rows.into_iter().map(DVector::from_vec).collect()
}

fn from_vectors(vs: &[DVector<f64>]) -> Vec<Vec<f64>> {
    vs.iter().map(|v| v.as_slice().to_vec()).collect()
}

/// A discrete layer: likelihoods, transitions, initial priors and preferences.
#[pyclass(name = "DiscreteModel", module = "worldkit")]
struct PyDiscreteModel {
    inner: DiscreteLayerModel,
}

fn build_spec(factor_sizes: Vec<usize>, modality_sizes: Vec<usize>, horizon: usize, controls: Vec<(usize, usize)>) -> DiscreteLayerSpec {
    controls
        .into_iter()
        .fold(DiscreteLayerSpec::new(factor_sizes, modality_sizes, horizon), |s, (f, n)| s.with_control(f, n))
}

#[pymethods]
impl PyDiscreteModel {
    /// Uniform maps. `controls` lists `(factor, cardinality)` pairs.
    #[staticmethod]
    #[pyo3(signature = (factor_sizes, modality_sizes, horizon, controls = Vec::new()))]
    fn uniform(factor_sizes: Vec<usize>, modality_sizes: Vec<usize>, horizon: usize, controls: Vec<(usize, usize)>) -> PyResult<Self> {
        let spec = build_spec(factor_sizes, modality_sizes, horizon, controls);
        Ok(Self {
            inner: DiscreteLayerModel::uniform(spec).map_err(value_error)?,
        })
    }

    /// Every categorical slice drawn from a symmetric Dirichlet.
    #[staticmethod]
    #[pyo3(signature = (factor_sizes, modality_sizes, horizon, seed, concentration = 1.0, controls = Vec::new()))]
    fn random(
        factor_sizes: Vec<usize>,
        modality_sizes: Vec<usize>,
        horizon: usize,
        seed: u64,
        concentration: f64,
        controls: Vec<(usize, usize)>,
    ) -> PyResult<Self> {
        use rand::SeedableRng;
        let spec = build_spec(factor_sizes, modality_sizes, horizon, controls);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inner: DiscreteLayerModel::random(spec, &mut rng, concentration).map_err(value_error)?,
        })
    }

    /// The T-maze generative process with the given reward preferences.
    #[staticmethod]
    #[pyo3(signature = (preference_strength = 0.0, preference_from = 1))]
    fn tmaze(preference_strength: f64, preference_from: usize) -> Self {
        let mut inner = TMazeEnv::ground_truth_model();
        inner.preferences = tmaze::preferences(preference_strength, preference_from);
        Self { inner }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: DiscreteLayerModel::from_json(text).map_err(value_error)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn factor_sizes(&self) -> Vec<usize> {
        self.inner.spec.factor_sizes.clone()
    }

    #[getter]
    fn modality_sizes(&self) -> Vec<usize> {
        self.inner.spec.modality_sizes.clone()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.spec.horizon
    }

    /// Replaces the log-preference table of one modality (`[time][outcome]`).
    fn set_preferences(&mut self, modality: usize, table: Vec<Vec<f64>>) -> PyResult<()> {
        let horizon = self.inner.spec.horizon;
        let Some(&n) = self.inner.spec.modality_sizes.get(modality) else {
            return Err(PyValueError::new_err(format!("no modality {modality}")));
        };
        if table.len() != horizon || table.iter().any(|r| r.len() != n) {
            return Err(PyValueError::new_err(format!("preference table must be {horizon}x{n}")));
        }
        let flat: Vec<f64> = table.into_iter().flatten().collect();
        self.inner.preferences[modality] = ndarray::Array2::from_shape_vec((horizon, n), flat).expect("checked shape");
        Ok(())
    }

    /// Ancestral sample: `(states, observations)`, each `[time][index]`.
    #[pyo3(signature = (seed, actions = Vec::new()))]
    fn sample(&self, seed: u64, actions: Vec<Vec<usize>>) -> PyResult<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let t = sample_trajectory(&self.inner, &actions, seed).map_err(value_error)?;
        Ok((t.states, t.observations))
    }

    /// Variational posterior: `(marginals[factor][time], free_energy, converged)`.
    #[pyo3(signature = (observations, actions = Vec::new()))]
    fn infer(&self, observations: Vec<Vec<Option<usize>>>, actions: Vec<Vec<usize>>) -> PyResult<(Vec<Vec<Vec<f64>>>, f64, bool)> {
        let r = infer_states(&self.inner, &to_obs(observations), &actions).map_err(value_error)?;
        let marginals = r
            .posterior
            .marginals
            .iter()
            .map(|chain| chain.iter().map(|c| c.probs().to_vec()).collect())
            .collect();
        Ok((marginals, r.free_energy(), r.converged))
    }

    /// Exact marginals and log-evidence by enumeration (small models only).
    #[pyo3(signature = (observations, actions = Vec::new()))]
    fn exact_posterior(&self, observations: Vec<Vec<Option<usize>>>, actions: Vec<Vec<usize>>) -> PyResult<(Vec<Vec<Vec<f64>>>, f64)> {
        let r = exact_posterior_oracle(&self.inner, &to_obs(observations), &actions).map_err(value_error)?;
        Ok((r.marginals, r.log_evidence))
    }

    /// Infers states from the data so far, scores every policy of length
    /// `steps` from time `now` and returns `(action, policies, efes, posterior)`
    /// where each EFE entry is `(risk, ambiguity, novelty, total)`.
    #[pyo3(signature = (observations, actions, now, steps, precision = DEFAULT_PRECISION))]
    #[allow(clippy::type_complexity)]
    fn plan(
        &self,
        observations: Vec<Vec<Option<usize>>>,
        actions: Vec<Vec<usize>>,
        now: usize,
        steps: usize,
        precision: f64,
    ) -> PyResult<(Vec<usize>, Vec<Vec<Vec<usize>>>, Vec<(f64, f64, f64, f64)>, Vec<f64>)> {
        let q = infer_states(&self.inner, &to_obs(observations), &actions).map_err(value_error)?;
        let p = plan(&self.inner, None, &q.posterior, now, steps, precision).map_err(value_error)?;
        Ok((
            p.action,
            p.policies.into_iter().map(|x| x.actions).collect(),
            p.efes.iter().map(|e| (e.risk, e.ambiguity, e.novelty, e.total)).collect(),
            p.posterior,
        ))
    }

    fn __repr__(&self) -> String {
        format!(
            "DiscreteModel(factor_sizes={:?}, modality_sizes={:?}, horizon={})",
            self.inner.spec.factor_sizes, self.inner.spec.modality_sizes, self.inner.spec.horizon
        )
    }
}

/// Recurrent switching linear dynamical system.
#[pyclass(name = "RsldsModel", module = "worldkit")]
struct PyRsldsModel {
    inner: RsldsModel,
}

#[pymethods]
impl PyRsldsModel {
    /// Single-regime random walk (`order` 0) or kinematic chain over `p` outputs.
    #[staticmethod]
    #[pyo3(signature = (p, order, dt, volatility = 0.1, obs_noise = 1e-2))]
    fn kinematic(p: usize, order: usize, dt: f64, volatility: f64, obs_noise: f64) -> PyResult<Self> {
        Ok(Self {
            inner: rslds::kinematic_model(p, order, dt, volatility, obs_noise).map_err(value_error)?,
        })
    }

    /// Five-regime model of the pool table (interior plus four walls).
    #[staticmethod]
    fn pool() -> Self {
        Self {
            inner: pool::ground_truth_model(&PoolConfig::default()),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: RsldsModel = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(value_error)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("model serialises")
    }

    #[getter]
    fn num_regimes(&self) -> usize {
        self.inner.num_regimes()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    /// `(regimes, states, observations)` for `steps` time steps.
    fn simulate(&self, steps: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let s = rslds::simulate(&self.inner, steps, seed, None).map_err(value_error)?;
        Ok((s.regimes, from_vectors(&s.states), from_vectors(&s.observations)))
    }

    /// `(log_evidence, regime_probs[t], state_means[t])`.
    #[allow(clippy::type_complexity)]
    fn filter(&self, observations: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let r = rslds::filter(&self.inner, &to_vectors(observations), None).map_err(value_error)?;
        let regimes = r.steps.iter().map(|s| s.regime.probs().to_vec()).collect();
        let means = r.steps.iter().map(|s| s.state.mean.as_slice().to_vec()).collect();
        Ok((r.log_evidence, regimes, means))
    }

    fn log_evidence(&self, trajectories: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
        let data: Vec<_> = trajectories.into_iter().map(to_vectors).collect();
        rslds::log_evidence(&self.inner, &data).map_err(value_error)
    }

    fn one_step_mse(&self, trajectories: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
        let data: Vec<_> = trajectories.into_iter().map(to_vectors).collect();
        rslds::one_step_mse(&self.inner, &data).map_err(value_error)
    }

    /// EM from this model; returns the fitted model and the evidence trace.
    #[pyo3(signature = (trajectories, iterations = 20))]
    fn fit_em(&self, trajectories: Vec<Vec<Vec<f64>>>, iterations: usize) -> PyResult<(Self, Vec<f64>)> {
        let data: Vec<_> = trajectories.into_iter().map(to_vectors).collect();
        let options = FitOptions {
            iterations,
            ..Default::default()
        };
        let fit = rslds::fit_em(&self.inner, &data, &options).map_err(value_error)?;
        Ok((Self { inner: fit.model }, fit.trace))
    }

    fn __repr__(&self) -> String {
        format!(
            "RsldsModel(regimes={}, state_dim={}, obs_dim={})",
            self.inner.num_regimes(),
            self.inner.state_dim(),
            self.inner.obs_dim()
        )
    }
}

#[pyclass(name = "TMaze", module = "worldkit")]
struct PyTMaze {
    inner: TMazeEnv,
}

#[pymethods]
impl PyTMaze {
    #[new]
    fn new() -> Self {
        Self { inner: TMazeEnv::new() }
    }

    /// Starts an episode; `arm` ("left" or "right") overrides the seeded draw.
    #[pyo3(signature = (seed = 0, arm = None))]
    fn reset(&mut self, seed: u64, arm: Option<&str>) -> PyResult<Vec<usize>> {
        Ok(match arm {
            None => self.inner.reset(seed),
            Some("left") => self.inner.reset_with(Arm::Left),
            Some("right") => self.inner.reset_with(Arm::Right),
            Some(other) => return Err(PyValueError::new_err(format!("unknown arm {other:?}"))),
        })
    }

    /// `(observation, done)`.
    fn step(&mut self, action: usize) -> PyResult<(Vec<usize>, bool)> {
        self.inner.step(action).map_err(value_error)
    }

    #[getter]
    fn location(&self) -> usize {
        self.inner.hidden().location
    }
}

#[pyclass(name = "PoolTable", module = "worldkit")]
struct PyPoolTable {
    inner: PoolTableEnv,
}

#[pymethods]
impl PyPoolTable {
    #[new]
    fn new() -> Self {
        Self {
            inner: PoolTableEnv::new(PoolConfig::default()),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed).as_slice().to_vec()
    }

    /// `(observation, done)`; action 0 applies no impulse.
    #[pyo3(signature = (action = 0))]
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, bool)> {
        let (y, done) = self.inner.step(action).map_err(value_error)?;
        Ok((y.as_slice().to_vec(), done))
    }
}

/// Runs an experiment from a JSON config; returns the summary as JSON.
#[pyfunction]
fn run_experiment(config_json: &str, out_dir: &str) -> PyResult<String> {
    let config = ExperimentConfig::from_json_str(config_json).map_err(harness_error)?;
    let summary = harness::run_experiment(&config, Path::new(out_dir)).map_err(harness_error)?;
    Ok(summary.to_json())
}

/// Recomputes and checks a run's summary; returns it as JSON.
#[pyfunction]
fn replay(run_dir: &str) -> PyResult<String> {
    Ok(harness::replay(Path::new(run_dir)).map_err(harness_error)?.to_json())
}

/// Writes the CSV metric tables; returns their paths.
#[pyfunction]
fn emit_plots(run_dir: &str) -> PyResult<Vec<String>> {
    let paths = harness::emit_plots(Path::new(run_dir)).map_err(harness_error)?;
    Ok(paths.iter().map(|p| p.display().to_string()).collect())
}

/// Structure search from a JSON config; returns `(best_structure_json, free_energy, fits)`.
#[pyfunction]
fn run_search(config_json: &str, out_dir: &str) -> PyResult<(String, f64, usize)> {
    let config = ExperimentConfig::from_json_str(config_json).map_err(harness_error)?;
    let out = harness::run_search(&config, Path::new(out_dir)).map_err(harness_error)?;
    let best = serde_json::to_string(&out.best).expect("knobs serialise");
    Ok((best, out.best_score.free_energy, out.fits))
}

#[pymodule]
#[pyo3(name = "worldkit")]
fn worldkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDiscreteModel>()?;
    m.add_class::<PyRsldsModel>()?;
    m.add_class::<PyTMaze>()?;
    m.add_class::<PyPoolTable>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(emit_plots, m)?)?;
    m.add_function(wrap_pyfunction!(run_search, m)?)?;
    m.add("CUE", tmaze::CUE)?;
    m.add("LEFT", tmaze::LEFT)?;
    m.add("RIGHT", tmaze::RIGHT)?;
    Ok(())
}
