#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use worldkit::beliefs::{Categorical, GaussianBelief};
use worldkit::discrete::{sample_trajectory, DiscreteLayerModel, DiscreteLayerSpec};
use worldkit::inference::Obs;
use worldkit::rslds::{simulate, EmissionModel, RecurrentRule, RegimeParams, RsldsModel};
use worldkit::search::{Dataset, DiscreteEpisode, StructureKnobs};

pub mod oracles;

/// Modality m reads factor m with the given reliability; factor f stays put
/// with probability `stay[f]`.
pub fn two_factor_world(horizon: usize, reliability: f64, stay: [f64; 2]) -> DiscreteLayerModel {
    let spec = DiscreteLayerSpec::new(vec![2, 2], vec![2, 2], horizon);
    let mut m = DiscreteLayerModel::uniform(spec).unwrap();
    for (modality, a) in m.likelihood.iter_mut().enumerate() {
        *a = ArrayD::from_shape_fn(vec![2, 2, 2], |ix| {
            let s = if modality == 0 { ix[1] } else { ix[2] };
            if ix[0] == s {
                reliability
            } else {
                1.0 - reliability
            }
        });
    }
    for (f, b) in m.transitions.iter_mut().enumerate() {
        *b = ArrayD::from_shape_fn(vec![2, 2, 1], |ix| if ix[0] == ix[1] { stay[f] } else { 1.0 - stay[f] });
    }
    m
}

pub fn generalised_world(horizon: usize, seed: u64) -> DiscreteLayerModel {
    let spec = DiscreteLayerSpec::new(vec![2], vec![2], horizon).with_generalised(1, Vec::new(), Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiscreteLayerModel::random(spec, &mut rng, 0.3).unwrap()
}

pub fn sample_dataset(model: &DiscreteLayerModel, episodes: usize, seed: u64) -> Dataset {
    let episodes = (0..episodes as u64)
        .map(|e| {
            let traj = sample_trajectory(model, &[], seed * 10_000 + e).unwrap();
            DiscreteEpisode {
                observations: traj
                    .observations
                    .iter()
                    .map(|row| row.iter().map(|&o| Obs::Outcome(o)).collect())
                    .collect(),
                actions: Vec::new(),
            }
        })
        .collect();
    Dataset::Discrete {
        modality_sizes: model.spec.modality_sizes.clone(),
        num_actions: 0,
        episodes,
    }
}

pub fn knobs_of(spec: &DiscreteLayerSpec) -> StructureKnobs {
    let mut k = StructureKnobs::discrete(spec.factor_sizes[0], spec.horizon);
    k.layers[0].factor_sizes = spec.factor_sizes.clone();
    k.layers[0].generalised_depth = spec.generalised_depth;
    k.controllable = vec![false; spec.factor_sizes.len()];
    k
}

/// Planar random walk whose drift points in one of three directions, with
/// sticky Markov switching.
pub fn three_regime_world(dt: f64) -> RsldsModel {
    let regimes = (0..3)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            RegimeParams {
                drift: DMatrix::identity(2, 2) * -0.5,
                bias: DVector::from_vec(vec![2.0 * angle.cos(), 2.0 * angle.sin()]),
                volatility: DMatrix::identity(2, 2) * 0.05,
            }
        })
        .collect();
    let mut rule = RecurrentRule::zeros(3, 2);
    rule.markov_logits = DMatrix::from_fn(3, 3, |i, j| if i == j { 3.0 } else { 0.0 });
    RsldsModel {
        regimes,
        rule,
        emission: EmissionModel {
            c: DMatrix::identity(2, 2),
            r: DMatrix::identity(2, 2) * 1e-3,
        },
        dt,
        initial_regime: Categorical::uniform(3),
        initial_state: GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.1).unwrap(),
    }
}

pub fn simulate_dataset(model: &RsldsModel, trajectories: usize, steps: usize, seed: u64) -> Dataset {
    Dataset::Continuous {
        dt: model.dt,
        trajectories: (0..trajectories as u64)
            .map(|i| simulate(model, steps, seed * 10_000 + i, None).unwrap().observations)
            .collect(),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    use rand::Rng;
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// `B Bᵀ + floor·I` for a random square B.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let b = random_matrix(rng, n, n, scale);
    &b * b.transpose() + DMatrix::identity(n, n) * floor
}

/// Random stable K-regime model with state dimension `d` and `p` outputs.
pub fn random_rslds(k: usize, d: usize, p: usize, seed: u64) -> RsldsModel {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regimes = (0..k)
        .map(|_| RegimeParams {
            drift: random_matrix(&mut rng, d, d, 1.0) - DMatrix::identity(d, d),
            bias: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            volatility: random_spd(&mut rng, d, 0.5, 0.05),
        })
        .collect();
    let rule = RecurrentRule {
        markov_logits: random_matrix(&mut rng, k, k, 1.0) + DMatrix::identity(k, k) * 2.0,
        recurrent_w: random_matrix(&mut rng, k, d, 1.0),
        recurrent_r: DVector::from_fn(k, |_, _| rng.random_range(-0.5..0.5)),
        action_logits: None,
    };
    let init: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = init.iter().sum();
    RsldsModel {
        regimes,
        rule,
        emission: EmissionModel {
            c: random_matrix(&mut rng, p, d, 1.0),
            r: random_spd(&mut rng, p, 0.3, 0.05),
        },
        dt: 0.1,
        initial_regime: Categorical::new(init.iter().map(|x| x / total).collect()).unwrap(),
        initial_state: GaussianBelief::new(
            DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            random_spd(&mut rng, d, 0.5, 0.1),
        )
        .unwrap(),
    }
}

pub struct KalmanStep {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_likelihood: f64,
}

/// Textbook Kalman filter for a single-regime model: condition on `y_0`
/// under the initial belief, then predict-update for every later step.
pub fn kalman_filter(model: &RsldsModel, ys: &[DVector<f64>]) -> Vec<KalmanStep> {
    let regime = &model.regimes[0];
    let dt = model.dt;
    let d = model.state_dim();
    let f = DMatrix::identity(d, d) + &regime.drift * dt;
    let u = &regime.bias * dt;
    let q = &regime.volatility * dt;
    let c = &model.emission.c;
    let r = &model.emission.r;
    let mut mean = model.initial_state.mean.clone();
    let mut cov = model.initial_state.covariance.clone();
    let mut out = Vec::new();
    for (t, y) in ys.iter().enumerate() {
        if t > 0 {
            mean = &f * &mean + &u;
            cov = &f * &cov * f.transpose() + &q;
        }
        let s = c * &cov * c.transpose() + r;
        let s_inv = s.clone().try_inverse().unwrap();
        let innovation = y - c * &mean;
        let gain = &cov * c.transpose() * &s_inv;
        let p = y.len() as f64;
        let log_likelihood = -0.5
            * (p * (2.0 * std::f64::consts::PI).ln()
                + s.determinant().ln()
                + (innovation.transpose() * &s_inv * &innovation)[(0, 0)]);
        mean = &mean + &gain * innovation;
        let joseph = DMatrix::identity(d, d) - &gain * c;
        cov = &joseph * &cov * joseph.transpose() + &gain * r * gain.transpose();
        out.push(KalmanStep {
            mean: mean.clone(),
            covariance: cov.clone(),
            log_likelihood,
        });
    }
    out
}
