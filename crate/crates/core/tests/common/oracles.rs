//! Brute-force references for discrete layers: a forward-backward smoother
//! over the joint state and an exhaustive expected-free-energy sum.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};
use worldkit::beliefs::{softmax, Categorical};
use worldkit::discrete::{DirichletModel, DiscreteLayerModel, DiscreteLayerSpec, FactorGraph, Modulator};
use worldkit::inference::{Obs, StatePosterior};
use worldkit::planning::Policy;

pub fn configs(sizes: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = sizes.iter().product();
    (0..total)
        .map(|mut flat| {
            let mut c = vec![0; sizes.len()];
            for k in (0..sizes.len()).rev() {
                c[k] = flat % sizes[k];
                flat /= sizes[k];
            }
            c
        })
        .collect()
}

pub fn modulator(graph: &FactorGraph, f: usize, cfg: &[usize], step: &[usize]) -> usize {
    match graph.factors[f].modulator {
        Modulator::Fixed => 0,
        Modulator::Action { control, .. } => step[control],
        Modulator::Factor(g) => cfg[g],
    }
}

pub fn transition(b: &[ArrayD<f64>], graph: &FactorGraph, from: &[usize], to: &[usize], step: &[usize]) -> f64 {
    (0..graph.num_factors())
        .map(|f| b[f][[to[f], from[f], modulator(graph, f, from, step)]])
        .product()
}

pub fn likelihood_lane(a: &ArrayD<f64>, graph: &FactorGraph, cfg: &[usize]) -> Vec<f64> {
    (0..a.shape()[0])
        .map(|o| {
            let mut idx = vec![o];
            idx.extend(graph.observed.iter().map(|&f| cfg[f]));
            a[IxDyn(&idx)]
        })
        .collect()
}

/// Scaled forward-backward over the joint state; returns `marginals[f][t]`.
pub fn joint_smoother(model: &DiscreteLayerModel, obs: &[Vec<Obs>], actions: &[Vec<usize>]) -> Vec<Vec<Vec<f64>>> {
    let graph = model.graph().unwrap();
    let sizes = graph.sizes();
    let cs = configs(&sizes);
    let horizon = model.spec.horizon;
    let evidence: Vec<Vec<f64>> = (0..horizon)
        .map(|t| {
            cs.iter()
                .map(|c| {
                    obs[t]
                        .iter()
                        .enumerate()
                        .map(|(m, o)| {
                            let lane = likelihood_lane(&model.likelihood[m], &graph, c);
                            match o {
                                Obs::Missing => 1.0,
                                Obs::Outcome(k) => lane[*k],
                                Obs::LogLikelihood(ll) => lane.iter().zip(ll).map(|(p, l)| p * l.exp()).sum(),
                            }
                        })
                        .product()
                })
                .collect()
        })
        .collect();
    let trans: Vec<Vec<Vec<f64>>> = (0..horizon.saturating_sub(1))
        .map(|t| {
            cs.iter()
                .map(|from| cs.iter().map(|to| transition(&model.transitions, &graph, from, to, actions.get(t).map_or(&[][..], |a| a))).collect())
                .collect()
        })
        .collect();
    let n = cs.len();
    let normalise = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
    };
    let mut alpha = vec![vec![0.0; n]; horizon];
    for (j, c) in cs.iter().enumerate() {
        alpha[0][j] = c.iter().enumerate().map(|(f, &s)| model.initial[f][s]).product::<f64>() * evidence[0][j];
    }
    normalise(&mut alpha[0]);
    for t in 1..horizon {
        for j in 0..n {
            alpha[t][j] = (0..n).map(|i| alpha[t - 1][i] * trans[t - 1][i][j]).sum::<f64>() * evidence[t][j];
        }
        normalise(&mut alpha[t]);
    }
    let mut beta = vec![vec![1.0; n]; horizon];
    for t in (0..horizon.saturating_sub(1)).rev() {
        for i in 0..n {
            beta[t][i] = (0..n).map(|j| trans[t][i][j] * evidence[t + 1][j] * beta[t + 1][j]).sum();
        }
        normalise(&mut beta[t]);
    }
    let mut out: Vec<Vec<Vec<f64>>> = sizes.iter().map(|&s| vec![vec![0.0; s]; horizon]).collect();
    for t in 0..horizon {
        let mut post: Vec<f64> = (0..n).map(|j| alpha[t][j] * beta[t][j]).collect();
        normalise(&mut post);
        for (j, c) in cs.iter().enumerate() {
            for (f, &s) in c.iter().enumerate() {
                out[f][t][s] += post[j];
            }
        }
    }
    out
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> DiscreteLayerSpec {
    let factors: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=4)).collect();
    let modalities: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=4)).collect();
    let spec = DiscreteLayerSpec::new(factors, modalities, rng.random_range(1..=4));
    if rng.random_bool(0.5) {
        let size = rng.random_range(2..=3);
        spec.with_control(0, size)
    } else {
        spec
    }
}

pub fn random_actions(spec: &DiscreteLayerSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let controls: Vec<usize> = (0..spec.factor_sizes.len())
        .filter(|&f| spec.is_controllable(f))
        .map(|f| spec.control_size(f))
        .collect();
    (0..spec.horizon.saturating_sub(1))
        .map(|_| controls.iter().map(|&c| rng.random_range(0..c)).collect())
        .collect()
}


pub fn dirichlet_kl(a: &[f64], b: &[f64]) -> f64 {
    let (a0, b0): (f64, f64) = (a.iter().sum(), b.iter().sum());
    ln_gamma(a0) - ln_gamma(b0)
        + a.iter().zip(b).map(|(&x, &y)| ln_gamma(y) - ln_gamma(x) + (x - y) * (digamma(x) - digamma(a0))).sum::<f64>()
}

pub fn increment_kl(alpha: &[f64], k: usize) -> f64 {
    let mut post = alpha.to_vec();
    post[k] += 1.0;
    dirichlet_kl(&post, alpha)
}

pub struct Terms {
    pub risk: f64,
    pub ambiguity: f64,
    pub novelty: f64,
}

pub fn exhaustive_efe(
    model: &DiscreteLayerModel,
    dir: Option<&DirichletModel>,
    current: &[Vec<f64>],
    policy: &Policy,
    prefs: &[Array2<f64>],
    now: usize,
) -> Terms {
    let graph = model.graph().unwrap();
    let cs = configs(&graph.sizes());
    let (a_maps, b_maps): (Vec<ArrayD<f64>>, Vec<ArrayD<f64>>) = match dir {
        Some(d) => (d.likelihood.iter().map(|c| c.mean()).collect(), d.transitions.iter().map(|c| c.mean()).collect()),
        None => (model.likelihood.clone(), model.transitions.clone()),
    };
    let horizon = policy.horizon();
    let mut predicted: Vec<Vec<Vec<f64>>> =
        (0..horizon).map(|_| model.spec.modality_sizes.iter().map(|&n| vec![0.0; n]).collect()).collect();
    let (mut ambiguity, mut novelty) = (0.0, 0.0);
    // Odometer over sequences s_now, ..., s_{now+horizon}.
    let mut seq = vec![0usize; horizon + 1];
    loop {
        let first = &cs[seq[0]];
        let mut w: f64 = first.iter().enumerate().map(|(f, &s)| current[f][s]).product();
        for h in 0..horizon {
            w *= transition(&b_maps, &graph, &cs[seq[h]], &cs[seq[h + 1]], &policy.actions[h]);
        }
        if w > 0.0 {
            for h in 0..horizon {
                let (from, to) = (&cs[seq[h]], &cs[seq[h + 1]]);
                for (m, a) in a_maps.iter().enumerate() {
                    let lane = likelihood_lane(a, &graph, to);
                    for (o, &p) in lane.iter().enumerate() {
                        predicted[h][m][o] += w * p;
                        if p > 0.0 {
                            ambiguity -= w * p * p.ln();
                        }
                    }
                    if let Some(d) = dir {
                        let alpha = likelihood_lane(d.likelihood[m].counts(), &graph, to);
                        novelty += w * lane.iter().enumerate().map(|(o, p)| p * increment_kl(&alpha, o)).sum::<f64>();
                    }
                }
                if let Some(d) = dir {
                    for f in 0..graph.num_factors() {
                        let counts = d.transitions[f].counts();
                        let m = modulator(&graph, f, from, &policy.actions[h]);
                        let alpha: Vec<f64> = (0..graph.factors[f].size).map(|s| counts[[s, from[f], m]]).collect();
                        novelty += w * increment_kl(&alpha, to[f]);
                    }
                }
            }
        }
        let mut k = 0;
        loop {
            if k > horizon {
                let risk = predicted
                    .iter()
                    .enumerate()
                    .map(|(h, per_m)| {
                        per_m
                            .iter()
                            .enumerate()
                            .map(|(m, q)| {
                                let row: Vec<f64> = prefs[m].row(now + h + 1).to_vec();
                                kl(q, softmax(&row, 1.0).unwrap().probs())
                            })
                            .sum::<f64>()
                    })
                    .sum();
                return Terms {
                    risk,
                    ambiguity,
                    novelty,
                };
            }
            seq[k] += 1;
            if seq[k] < cs.len() {
                break;
            }
            seq[k] = 0;
            k += 1;
        }
    }
}

pub fn random_marginals(graph: &FactorGraph, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    graph
        .sizes()
        .iter()
        .map(|&n| {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn posterior_at(marginals: &[Vec<f64>], horizon: usize) -> StatePosterior {
    StatePosterior::from_marginals(
        marginals
            .iter()
            .map(|p| vec![Categorical::new(p.clone()).unwrap(); horizon])
            .collect(),
    )
}

