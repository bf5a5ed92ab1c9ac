mod common;

use common::oracles::*;
use ndarray::ArrayD;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use worldkit::beliefs::DirichletCounts;
use worldkit::discrete::{apply_generalised_structure, sample_trajectory, DirichletModel, DiscreteLayerModel, DiscreteLayerSpec};
use worldkit::inference::{
    exact_posterior_oracle, infer_states, infer_states_with, observations_from_indices, update_parameters,
    variational_free_energy, Family, InferenceOptions, LogParams, Obs,
};

fn random_case(seed: u64) -> (DiscreteLayerModel, Vec<Vec<Obs>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng);
    let model = DiscreteLayerModel::random(spec.clone(), &mut rng, 1.0).unwrap();
    let actions = random_actions(&spec, &mut rng);
    let traj = sample_trajectory(&model, &actions, seed).unwrap();
    let mut obs = observations_from_indices(&traj.observations);
    for row in &mut obs {
        for o in row.iter_mut() {
            if rng.random_bool(0.25) {
                *o = Obs::Missing;
            }
        }
    }
    (model, obs, actions)
}

fn disambiguating(seed: u64) -> DiscreteLayerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=4)).collect();
    let spec = DiscreteLayerSpec::new(factors.clone(), factors, rng.random_range(1..=4));
    let mut model = DiscreteLayerModel::random(spec, &mut rng, 1.0).unwrap();
    for (m, a) in model.likelihood.iter_mut().enumerate() {
        *a = ArrayD::from_shape_fn(a.raw_dim(), |ix| if ix[0] == ix[1 + m] { 1.0 } else { 0.0 });
    }
    model
}

#[test]
fn exact_oracle_matches_forward_backward_on_hmms() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = DiscreteLayerSpec::new(vec![2], vec![2], 4);
        let model = DiscreteLayerModel::random(spec, &mut rng, 1.0).unwrap();
        let obs = observations_from_indices(&sample_trajectory(&model, &[], seed).unwrap().observations);
        let exact = exact_posterior_oracle(&model, &obs, &[]).unwrap();
        let reference = joint_smoother(&model, &obs, &[]);
        for (a, b) in exact.marginals[0].iter().flatten().zip(reference[0].iter().flatten()) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn two_factor_three_state_marginals_are_close_to_exact() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = DiscreteLayerSpec::new(vec![3, 3], vec![3, 2], 3);
        let model = DiscreteLayerModel::random(spec, &mut rng, 1.0).unwrap();
        let obs = observations_from_indices(&sample_trajectory(&model, &[], seed).unwrap().observations);
        let exact = exact_posterior_oracle(&model, &obs, &[]).unwrap();
        let q = infer_states(&model, &obs, &[]).unwrap().posterior;
        for f in 0..2 {
            for t in 0..3 {
                let gap = kl(&exact.marginals[f][t], q.marginal(f, t).probs());
                assert!(gap <= 0.05, "seed {seed} factor {f} time {t}: {gap}");
            }
        }
    }
}

#[test]
fn exact_posterior_attains_the_evidence() {
    for seed in 0..30 {
        let (model, obs, actions) = random_case(seed);
        let joint = infer_states_with(
            &model.spec,
            &LogParams::from_model(&model),
            &obs,
            &actions,
            &InferenceOptions {
                family: Family::Joint,
                ..Default::default()
            },
        )
        .unwrap();
        let exact = exact_posterior_oracle(&model, &obs, &actions).unwrap();
        let f = variational_free_energy(&model, &joint.posterior, &obs, &actions).unwrap();
        assert!((f + exact.log_evidence).abs() <= 1e-8, "seed {seed}: {f} vs {}", -exact.log_evidence);
    }
}

#[test]
fn two_hundred_steps_recover_a_deterministic_likelihood() {
    let spec = DiscreteLayerSpec::new(vec![3], vec![3], 200);
    let mut truth = DiscreteLayerModel::uniform(spec).unwrap();
    truth.initial[0] = vec![1.0, 0.0, 0.0];
    truth.transitions[0] = ArrayD::from_shape_fn(vec![3, 3, 1], |ix| if ix[0] == (ix[1] + 1) % 3 { 1.0 } else { 0.0 });
    truth.likelihood[0] = ArrayD::from_shape_fn(vec![3, 3], |ix| if ix[0] == (ix[1] + 2) % 3 { 1.0 } else { 0.0 });
    let mut dir = DirichletModel::from_model(&truth, 100.0, 1e-2).unwrap();
    dir.likelihood[0] = DirichletCounts::new(ArrayD::from_elem(vec![3, 3], 1.0)).unwrap();
    let obs = observations_from_indices(&sample_trajectory(&truth, &[], 9).unwrap().observations);
    let q = infer_states_with(&dir.spec, &LogParams::from_dirichlet(&dir), &obs, &[], &InferenceOptions::default()).unwrap();
    let learned = update_parameters(&dir, &q.posterior, &obs, &[], 1.0).unwrap();
    let mean = learned.likelihood[0].mean();
    let gap = (&mean - &truth.likelihood[0]).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(gap <= 0.05, "max error {gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn free_energy_bounds_negative_log_evidence(seed in 0u64..1_000_000) {
        let (model, obs, actions) = random_case(seed);
        let exact = exact_posterior_oracle(&model, &obs, &actions).unwrap();
        for family in [Family::Factorised, Family::default()] {
            let options = InferenceOptions { family, ..Default::default() };
            let r = infer_states_with(&model.spec, &LogParams::from_model(&model), &obs, &actions, &options).unwrap();
            let f = variational_free_energy(&model, &r.posterior, &obs, &actions).unwrap();
            prop_assert!(f >= -exact.log_evidence - 1e-9, "{} < {}", f, -exact.log_evidence);
        }
    }

    #[test]
    fn free_energy_trace_never_increases(seed in 0u64..1_000_000) {
        let (model, obs, actions) = random_case(seed);
        let options = InferenceOptions { family: Family::Factorised, ..Default::default() };
        let r = infer_states_with(&model.spec, &LogParams::from_model(&model), &obs, &actions, &options).unwrap();
        prop_assert!(r.trace.values.iter().all(|x| x.is_finite()));
        for w in r.trace.values.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", r.trace.values);
        }
    }

    #[test]
    fn disambiguated_posteriors_are_exact(seed in 0u64..1_000_000) {
        let model = disambiguating(seed);
        let obs = observations_from_indices(&sample_trajectory(&model, &[], seed).unwrap().observations);
        let exact = exact_posterior_oracle(&model, &obs, &[]).unwrap();
        let options = InferenceOptions { family: Family::Factorised, ..Default::default() };
        let q = infer_states_with(&model.spec, &LogParams::from_model(&model), &obs, &[], &options).unwrap().posterior;
        for (f, chain) in exact.marginals.iter().enumerate() {
            for (t, p) in chain.iter().enumerate() {
                for (a, b) in p.iter().zip(q.marginal(f, t).probs()) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn learning_rates_add(seed in 0u64..1_000_000, rate in 0.01f64..0.5) {
        let (model, obs, actions) = random_case(seed);
        let dir = DirichletModel::from_model(&model, 4.0, 0.5).unwrap();
        let q = infer_states(&model, &obs, &actions).unwrap().posterior;
        let twice = update_parameters(&update_parameters(&dir, &q, &obs, &actions, rate).unwrap(), &q, &obs, &actions, rate).unwrap();
        let once = update_parameters(&dir, &q, &obs, &actions, 2.0 * rate).unwrap();
        let pairs = twice.likelihood.iter().zip(&once.likelihood)
            .chain(twice.transitions.iter().zip(&once.transitions))
            .chain(twice.initial.iter().zip(&once.initial));
        for (a, b) in pairs {
            for (x, y) in a.counts().iter().zip(b.counts()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
        for (a, b) in once.likelihood.iter().zip(&dir.likelihood) {
            prop_assert!(a.counts().iter().zip(b.counts()).all(|(x, y)| x >= y));
        }
    }

    #[test]
    fn generalised_expansion_adds_depth_per_flagged_factor(
        sizes in prop::collection::vec(2usize..5, 1..4),
        depth in 0usize..3,
        mask in prop::collection::vec(any::<bool>(), 3),
    ) {
        let flags: Vec<bool> = mask[..sizes.len()].to_vec();
        let flagged = flags.iter().filter(|&&f| f).count();
        let spec = DiscreteLayerSpec::new(sizes.clone(), vec![2], 3).with_generalised(depth, flags, Vec::new());
        let graph = apply_generalised_structure(&spec).unwrap();
        let expected = sizes.len() + if depth == 0 { 0 } else { depth * flagged };
        prop_assert_eq!(graph.num_factors(), expected);
    }

    #[test]
    fn seeded_sampling_repeats(seed in 0u64..1_000_000) {
        let (model, _, actions) = random_case(seed);
        let a = sample_trajectory(&model, &actions, seed).unwrap();
        let b = sample_trajectory(&model, &actions, seed).unwrap();
        prop_assert_eq!(a.states, b.states);
        prop_assert_eq!(a.observations, b.observations);
    }
}
