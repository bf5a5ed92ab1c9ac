//! Ground-truth environments: a cue/T-maze and a bouncing ball on a pool table.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::beliefs::{Categorical, GaussianBelief};
use crate::discrete::{DirichletModel, DiscreteLayerModel, DiscreteLayerSpec};
use crate::error::{Error, Result};
use crate::rslds::{EmissionModel, RecurrentRule, RegimeParams, RsldsModel};

/// One line of an episode log. `hidden` is diagnostic only and must never
/// be fed to an agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord<O, H> {
    pub t: usize,
    pub action: Option<usize>,
    pub observation: O,
    pub hidden: H,
}

pub fn episode_log_lines<O: Serialize, H: Serialize>(records: &[EpisodeRecord<O, H>]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Serialisation(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub mod tmaze {
    use super::*;

    pub const CENTRE: usize = 0;
    pub const LEFT: usize = 1;
    pub const RIGHT: usize = 2;
    pub const CUE: usize = 3;
    pub const NUM_LOCATIONS: usize = 4;

    /// Modalities: location, reward (null/reward/no-reward), cue (null/left/right).
    pub const LOCATION: usize = 0;
    pub const REWARD: usize = 1;
    pub const CUE_MODALITY: usize = 2;

    pub const NULL: usize = 0;
    pub const REWARD_OUTCOME: usize = 1;
    pub const NO_REWARD: usize = 2;
    pub const CUE_LEFT: usize = 1;
    pub const CUE_RIGHT: usize = 2;

    /// Number of moves per episode.
    pub const EPISODE_ACTIONS: usize = 2;

    #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum Arm {
        Left,
        Right,
    }

    impl Arm {
        /// State index of the context factor.
        pub fn index(self) -> usize {
            match self {
                Arm::Left => 0,
                Arm::Right => 1,
            }
        }
    }

    #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Hidden {
        pub location: usize,
        pub reward_arm: Arm,
    }

    /// Arms are absorbing; every other location can move anywhere.
    pub fn next_location(current: usize, action: usize) -> usize {
        if current == LEFT || current == RIGHT {
            current
        } else {
            action
        }
    }

    /// Deterministic `[location, reward, cue]` outcome.
    pub fn observe(location: usize, arm: Arm) -> Vec<usize> {
        let reward = match (location, arm) {
            (LEFT, Arm::Left) | (RIGHT, Arm::Right) => REWARD_OUTCOME,
            (LEFT, _) | (RIGHT, _) => NO_REWARD,
            _ => NULL,
        };
        let cue = match (location, arm) {
            (CUE, Arm::Left) => CUE_LEFT,
            (CUE, Arm::Right) => CUE_RIGHT,
            _ => NULL,
        };
        vec![location, reward, cue]
    }

    #[derive(Clone, Debug)]
    pub struct TMazeEnv {
        hidden: Hidden,
        t: usize,
        started: bool,
    }

    impl Default for TMazeEnv {
        fn default() -> Self {
            Self::new()
        }
    }

    impl TMazeEnv {
        pub fn new() -> Self {
            Self {
                hidden: Hidden {
                    location: CENTRE,
                    reward_arm: Arm::Left,
                },
                t: 0,
                started: false,
            }
        }

        pub fn reset(&mut self, seed: u64) -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arm = if rng.random_bool(0.5) { Arm::Left } else { Arm::Right };
            self.reset_with(arm)
        }

        /// Reset with a chosen reward arm.
        pub fn reset_with(&mut self, arm: Arm) -> Vec<usize> {
            self.hidden = Hidden {
                location: CENTRE,
                reward_arm: arm,
            };
            self.t = 0;
            self.started = true;
            observe(CENTRE, arm)
        }

        pub fn step(&mut self, action: usize) -> Result<(Vec<usize>, bool)> {
            if !self.started || self.t >= EPISODE_ACTIONS {
                return Err(Error::EpisodeDone);
            }
            if action >= NUM_LOCATIONS {
                return Err(Error::InvalidAction(action));
            }
            self.hidden.location = next_location(self.hidden.location, action);
            self.t += 1;
            Ok((observe(self.hidden.location, self.hidden.reward_arm), self.t >= EPISODE_ACTIONS))
        }

        pub fn hidden(&self) -> Hidden {
            self.hidden
        }

        pub fn time(&self) -> usize {
            self.t
        }

        pub fn spec() -> DiscreteLayerSpec {
            DiscreteLayerSpec::new(vec![NUM_LOCATIONS, 2], vec![NUM_LOCATIONS, 3, 3], EPISODE_ACTIONS + 1)
                .with_control(0, NUM_LOCATIONS)
        }

        /// Exact generative process as a discrete layer with flat preferences.
        pub fn ground_truth_model() -> DiscreteLayerModel {
            model_with_reliability(1.0)
        }
    }

    /// T-maze layer in which the chosen arm reports its true outcome with
    /// probability `reliability`.
    pub fn model_with_reliability(reliability: f64) -> DiscreteLayerModel {
        let spec = TMazeEnv::spec();
        let mut model = DiscreteLayerModel::uniform(spec).expect("valid T-maze spec");
        let arms = [Arm::Left, Arm::Right];
        for m in 0..3 {
            let n = model.spec.modality_sizes[m];
            let mut a = ArrayD::zeros(IxDyn(&[n, NUM_LOCATIONS, 2]));
            for loc in 0..NUM_LOCATIONS {
                for arm in arms {
                    let o = observe(loc, arm)[m];
                    if m == REWARD && (loc == LEFT || loc == RIGHT) {
                        let other = if o == REWARD_OUTCOME { NO_REWARD } else { REWARD_OUTCOME };
                        a[[o, loc, arm.index()]] = reliability;
                        a[[other, loc, arm.index()]] += 1.0 - reliability;
                    } else {
                        a[[o, loc, arm.index()]] = 1.0;
                    }
                }
            }
            model.likelihood[m] = a;
        }
        let mut b_loc = ArrayD::zeros(IxDyn(&[NUM_LOCATIONS, NUM_LOCATIONS, NUM_LOCATIONS]));
        for cur in 0..NUM_LOCATIONS {
            for act in 0..NUM_LOCATIONS {
                b_loc[[next_location(cur, act), cur, act]] = 1.0;
            }
        }
        model.transitions[0] = b_loc;
        let mut b_ctx = ArrayD::zeros(IxDyn(&[2, 2, 1]));
        b_ctx[[0, 0, 0]] = 1.0;
        b_ctx[[1, 1, 0]] = 1.0;
        model.transitions[1] = b_ctx;
        model.initial = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.5, 0.5]];
        model
    }

    /// Agent prior: known layout, reward reliability believed to be 0.9,
    /// encoded as Dirichlet counts of total `scale` per column.
    pub fn agent_prior(scale: f64) -> Result<DirichletModel> {
        DirichletModel::from_model(&model_with_reliability(0.9), scale, 1e-2)
    }

    /// Reward log-preferences of `strength` for steps `t ≥ from`, zero elsewhere.
    pub fn preferences(strength: f64, from: usize) -> Vec<Array2<f64>> {
        let spec = TMazeEnv::spec();
        let mut c: Vec<Array2<f64>> = spec
            .modality_sizes
            .iter()
            .map(|&n| Array2::zeros((spec.horizon, n)))
            .collect();
        for t in from..spec.horizon {
            c[REWARD][[t, REWARD_OUTCOME]] = strength;
            c[REWARD][[t, NO_REWARD]] = -strength;
        }
        c
    }
}

pub mod pool {
    use super::*;

    pub const INTERIOR: usize = 0;
    pub const WALL_LEFT: usize = 1;
    pub const WALL_RIGHT: usize = 2;
    pub const WALL_BOTTOM: usize = 3;
    pub const WALL_TOP: usize = 4;
    pub const NUM_REGIMES: usize = 5;
    /// Action 0 is "no impulse"; 1..=8 push in the eight compass directions.
    pub const NUM_ACTIONS: usize = 9;
    /// Slope of the wall logits per unit of predicted band penetration.
    pub const WALL_SHARPNESS: f64 = 1e6;

    #[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    pub struct PoolConfig {
        pub dt: f64,
        pub band: f64,
        /// Velocity noise standard deviation per step.
        pub noise: f64,
        pub obs_noise: f64,
        pub impulse: f64,
        pub steps: usize,
    }

    impl Default for PoolConfig {
        fn default() -> Self {
            Self {
                dt: 0.05,
                band: 0.05,
                noise: 0.01,
                obs_noise: 0.005,
                impulse: 0.2,
                steps: 100,
            }
        }
    }

    #[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
    pub struct BallState {
        pub position: [f64; 2],
        pub velocity: [f64; 2],
    }

    impl BallState {
        pub fn to_vector(&self) -> DVector<f64> {
            DVector::from_vec(vec![self.position[0], self.position[1], self.velocity[0], self.velocity[1]])
        }
    }

    #[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
    pub struct Hidden {
        pub ball: BallState,
        pub regime: usize,
    }

    /// Band penetration the ball would reach after one noiseless step, per
    /// wall (left, right, bottom, top); positive means inside the band.
    pub fn predicted_depths(cfg: &PoolConfig, ball: &BallState) -> [f64; 4] {
        let px = ball.position[0] + cfg.dt * ball.velocity[0];
        let py = ball.position[1] + cfg.dt * ball.velocity[1];
        [cfg.band - px, px - (1.0 - cfg.band), cfg.band - py, py - (1.0 - cfg.band)]
    }

    /// Interior unless some wall would be entered; the deepest wall wins.
    pub fn sector(cfg: &PoolConfig, ball: &BallState) -> usize {
        let depths = predicted_depths(cfg, ball);
        let mut best = INTERIOR;
        let mut best_depth = 0.0;
        for (i, &d) in depths.iter().enumerate() {
            if d > best_depth {
                best = i + 1;
                best_depth = d;
            }
        }
        best
    }

    pub fn impulse(cfg: &PoolConfig, action: usize) -> Result<[f64; 2]> {
        if action >= NUM_ACTIONS {
            return Err(Error::InvalidAction(action));
        }
        if action == 0 {
            return Ok([0.0, 0.0]);
        }
        let angle = (action - 1) as f64 * std::f64::consts::FRAC_PI_4;
        Ok([cfg.impulse * angle.cos(), cfg.impulse * angle.sin()])
    }

    #[derive(Clone, Debug)]
    pub struct PoolTableEnv {
        pub config: PoolConfig,
        ball: BallState,
        regime: usize,
        rng: ChaCha8Rng,
        t: usize,
        started: bool,
    }

    impl PoolTableEnv {
        pub fn new(config: PoolConfig) -> Self {
            Self {
                config,
                ball: BallState {
                    position: [0.5, 0.5],
                    velocity: [0.0, 0.0],
                },
                regime: INTERIOR,
                rng: ChaCha8Rng::seed_from_u64(0),
                t: 0,
                started: false,
            }
        }

        pub fn reset(&mut self, seed: u64) -> DVector<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let position = [rng.random_range(0.2..=0.8), rng.random_range(0.2..=0.8)];
            let speed = rng.random_range(0.5..=1.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            self.reset_to(
                BallState {
                    position,
                    velocity: [speed * angle.cos(), speed * angle.sin()],
                },
                rng.random(),
            )
        }

        /// Start from a given ball state; `noise_seed` drives all later noise.
        pub fn reset_to(&mut self, ball: BallState, noise_seed: u64) -> DVector<f64> {
            self.ball = ball;
            self.regime = INTERIOR;
            self.rng = ChaCha8Rng::seed_from_u64(noise_seed);
            self.t = 0;
            self.started = true;
            self.observe()
        }

        fn gauss(&mut self, sd: f64) -> f64 {
            if sd == 0.0 {
                return 0.0;
            }
            let z: f64 = StandardNormal.sample(&mut self.rng);
            sd * z
        }

        fn observe(&mut self) -> DVector<f64> {
            let sd = self.config.obs_noise;
            let x = self.ball.position[0] + self.gauss(sd);
            let y = self.ball.position[1] + self.gauss(sd);
            DVector::from_vec(vec![x, y])
        }

        pub fn step(&mut self, action: usize) -> Result<(DVector<f64>, bool)> {
            if !self.started || self.t >= self.config.steps {
                return Err(Error::EpisodeDone);
            }
            let kick = impulse(&self.config, action)?;
            self.ball.velocity[0] += kick[0];
            self.ball.velocity[1] += kick[1];
            let regime = sector(&self.config, &self.ball);
            match regime {
                WALL_LEFT | WALL_RIGHT => self.ball.velocity[0] = -self.ball.velocity[0],
                WALL_BOTTOM | WALL_TOP => self.ball.velocity[1] = -self.ball.velocity[1],
                _ => {}
            }
            let sd = self.config.noise;
            self.ball.velocity[0] += self.gauss(sd);
            self.ball.velocity[1] += self.gauss(sd);
            self.ball.position[0] += self.config.dt * self.ball.velocity[0];
            self.ball.position[1] += self.config.dt * self.ball.velocity[1];
            self.regime = regime;
            self.t += 1;
            Ok((self.observe(), self.t >= self.config.steps))
        }

        pub fn hidden(&self) -> Hidden {
            Hidden {
                ball: self.ball,
                regime: self.regime,
            }
        }

        /// Passive dynamics as a five-regime rsLDS over (px, py, vx, vy).
        /// Impulses are not part of the model: the switching rule only sees
        /// the state, so an impulse would have to act through the logits.
        pub fn ground_truth_model(&self) -> RsldsModel {
            ground_truth_model(&self.config)
        }
    }

    pub fn ground_truth_model(cfg: &PoolConfig) -> RsldsModel {
        let dt = cfg.dt;
        let reflections = [[1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, -1.0]];
        let s2 = cfg.noise * cfg.noise;
        let mut q = DMatrix::zeros(4, 4);
        for i in 0..2 {
            q[(i, i)] = s2 * dt * dt;
            q[(i, i + 2)] = s2 * dt;
            q[(i + 2, i)] = s2 * dt;
            q[(i + 2, i + 2)] = s2;
        }
        let volatility = q / dt;
        let regimes = reflections
            .iter()
            .map(|r| {
                let mut drift = DMatrix::zeros(4, 4);
                for i in 0..2 {
                    drift[(i, i + 2)] = r[i];
                    drift[(i + 2, i + 2)] = (r[i] - 1.0) / dt;
                }
                RegimeParams {
                    drift,
                    bias: DVector::zeros(4),
                    volatility: volatility.clone(),
                }
            })
            .collect();
        let k = WALL_SHARPNESS;
        let lo = cfg.band;
        let hi = 1.0 - cfg.band;
        let w = DMatrix::from_row_slice(
            NUM_REGIMES,
            4,
            &[
                0.0, 0.0, 0.0, 0.0, //
                -k, 0.0, -k * dt, 0.0, //
                k, 0.0, k * dt, 0.0, //
                0.0, -k, 0.0, -k * dt, //
                0.0, k, 0.0, k * dt,
            ],
        );
        let r = DVector::from_vec(vec![0.0, k * lo, -k * hi, k * lo, -k * hi]);
        let mut c = DMatrix::zeros(2, 4);
        c[(0, 0)] = 1.0;
        c[(1, 1)] = 1.0;
        // Moment match of the reset distribution: position uniform on
        // [0.2, 0.8]², speed uniform on [0.5, 1] in a uniform direction.
        let pos_var = 0.6f64.powi(2) / 12.0;
        let vel_var = (1.0 - 0.125) / (3.0 * 0.5) / 2.0;
        let mut init_cov = DMatrix::zeros(4, 4);
        for i in 0..2 {
            init_cov[(i, i)] = pos_var;
            init_cov[(i + 2, i + 2)] = vel_var;
        }
        RsldsModel {
            regimes,
            rule: RecurrentRule {
                markov_logits: DMatrix::zeros(NUM_REGIMES, NUM_REGIMES),
                recurrent_w: w,
                recurrent_r: r,
                action_logits: None,
            },
            emission: EmissionModel {
                c,
                r: DMatrix::identity(2, 2) * cfg.obs_noise.powi(2),
            },
            dt,
            initial_regime: Categorical::one_hot(NUM_REGIMES, INTERIOR),
            initial_state: GaussianBelief {
                mean: DVector::from_vec(vec![0.5, 0.5, 0.0, 0.0]),
                covariance: init_cov,
            },
        }
    }

    /// Passive rollout of `steps` transitions; returns the `steps + 1`
    /// observations and the hidden path.
    pub fn rollout(cfg: &PoolConfig, seed: u64, steps: usize) -> (Vec<DVector<f64>>, Vec<Hidden>) {
        let mut env = PoolTableEnv::new(PoolConfig { steps, ..*cfg });
        let mut ys = vec![env.reset(seed)];
        let mut hidden = vec![env.hidden()];
        for _ in 0..steps {
            let (y, _) = env.step(0).expect("within episode");
            ys.push(y);
            hidden.push(env.hidden());
        }
        (ys, hidden)
    }
}
