use decom::env;
use decom::nn::Activation;
use decom::policy::{BaseMode, DecomPolicy, Exploration, PolicyConfig, Variant};
use decom::trainer::{gradient_aggregation_check, PolicyBatch};
use decom::critic::CentralCritic;
use decom::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBS: usize = 4;
const ACT: usize = 2;

fn config(n: usize, variant: Variant, lambda: f64, mode: BaseMode) -> PolicyConfig {
    PolicyConfig {
        obs_dim: OBS,
        action_dim: ACT,
        action_low: -1.0,
        action_high: 1.0,
        neighbors: env::fully_connected(n),
        hidden: vec![16, 16],
        hidden_activation: Activation::LeakyRelu,
        base_mode: mode,
        variant,
        lambda,
    }
}

fn policy(n: usize, variant: Variant, lambda: f64, seed: u64) -> DecomPolicy<f64> {
    DecomPolicy::new(config(n, variant, lambda, BaseMode::Deterministic), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn vec_in(rng: &mut ChaCha8Rng, d: usize, w: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-w..w)).collect()
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::A), Just(Variant::N), Just(Variant::I)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_lambda_composes_to_the_clamped_base(v in variant(), seed in 0u64..1000, b in prop::collection::vec(-3.0f64..3.0, ACT)) {
        let p = policy(3, v, 0.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = vec_in(&mut rng, OBS, 2.0);
        let nb = vec![vec_in(&mut rng, ACT, 1.0), vec_in(&mut rng, ACT, 1.0)];
        let c = p.compose(0, &o, &b, &nb).unwrap();
        prop_assert_eq!(&c.pre_clamp, &b);
        let clamped: Vec<f64> = b.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        prop_assert_eq!(c.action, clamped);
    }

    #[test]
    fn actions_stay_in_the_box(v in variant(), seed in 0u64..1000, lambda in 0.0f64..3.0) {
        let p = policy(3, v, lambda, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = p.config().clone();
        let mut ex = Exploration::new(&cfg, 0.15, 2.0, 2.0, seed);
        let obs: Vec<Vec<f64>> = (0..3).map(|_| vec_in(&mut rng, OBS, 5.0)).collect();
        for _ in 0..5 {
            let d = p.joint_act(&obs, Some(&mut ex), &mut rng).unwrap();
            for a in d.actions.iter().flatten() {
                prop_assert!((-1.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn arity_of_each_variant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let o = vec_in(&mut rng, OBS, 1.0);
        let b = vec_in(&mut rng, ACT, 0.5);
        let nb1 = vec![vec_in(&mut rng, ACT, 1.0), vec_in(&mut rng, ACT, 1.0)];
        let mut nb2 = nb1.clone();
        nb2[1][0] += 0.5;

        let n = policy(3, Variant::N, 0.3, seed);
        prop_assert_eq!(n.compose(0, &o, &b, &nb1).unwrap(), n.compose(0, &o, &b, &nb2).unwrap());

        let a = policy(3, Variant::A, 0.3, seed);
        prop_assert_ne!(a.compose(0, &o, &b, &nb1).unwrap().pre_clamp, a.compose(0, &o, &b, &nb2).unwrap().pre_clamp);

        // Variant I: the perturbation ignores b_i, so a_i − b_i is constant in b_i.
        let i = policy(3, Variant::I, 0.3, seed);
        let b2: Vec<f64> = b.iter().map(|x| x * -0.7).collect();
        let d1: Vec<f64> = i.compose(0, &o, &b, &nb1).unwrap().pre_clamp.iter().zip(&b).map(|(x, y)| x - y).collect();
        let d2: Vec<f64> = i.compose(0, &o, &b2, &nb2).unwrap().pre_clamp.iter().zip(&b2).map(|(x, y)| x - y).collect();
        for (x, y) in d1.iter().zip(&d2) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn base_actions_are_broadcast_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs: Vec<Vec<f64>> = (0..4).map(|_| vec_in(&mut rng, OBS, 1.0)).collect();
    let a = policy(4, Variant::A, 1.0, 0).joint_act(&obs, None, &mut rng).unwrap();
    assert_eq!(a.broadcast_rounds, 1);
    assert_eq!(a.messages, 4 * 3);
    for v in [Variant::N, Variant::I] {
        let d = policy(4, v, 1.0, 0).joint_act(&obs, None, &mut rng).unwrap();
        assert_eq!((d.broadcast_rounds, d.messages), (0, 0));
    }
}

#[test]
fn joint_act_is_deterministic_given_seed_and_params() {
    let p = policy(3, Variant::A, 1.0, 5);
    let obs: Vec<Vec<f64>> = (0..3).map(|i| vec![0.1 * i as f64; OBS]).collect();
    let run = || {
        let mut ex = Exploration::new(p.config(), 0.15, 0.3, 0.1, 9);
        p.joint_act(&obs, Some(&mut ex), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_weight_base_acts_zero() {
    let mut p = policy(2, Variant::A, 1.0, 0);
    for net in p.base_nets_mut() {
        let n = net.num_params();
        net.assign_flat(&vec![0.0; n]).unwrap();
    }
    let b = p.base_act(0, &[0.3; OBS], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(b.action, vec![0.0; ACT]);
}

#[test]
fn gaussian_base_at_log_std_floor_returns_the_mean() {
    let mut p = DecomPolicy::<f64>::new(config(1, Variant::A, 0.0, BaseMode::Gaussian), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // Push the log-std block of the output layer far below the floor.
    let last = p.base_nets_mut()[0].layers_mut().last_mut().unwrap();
    let cols = last.bias.cols();
    for c in ACT..cols {
        last.bias.data_mut()[c] = -1e3;
    }
    let mean = p.base_act(0, &[0.2; OBS], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().action;
    let cfg = p.config().clone();
    let mut ex = Exploration::new(&cfg, 0.15, 0.3, 0.0, 1);
    let s = p.base_act(0, &[0.2; OBS], Some(&mut ex), &mut ChaCha8Rng::seed_from_u64(3)).unwrap().action;
    for (a, b) in s.iter().zip(&mean) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn soft_update_with_unit_rate_copies_online_weights() {
    let mut p = policy(2, Variant::A, 1.0, 3);
    for net in p.base_nets_mut() {
        let n = net.num_params();
        net.assign_flat(&vec![0.25; n]).unwrap();
    }
    p.soft_update_targets(1.0, 1.0).unwrap();
    assert_eq!(p.base_targets()[0].flatten(), p.base_nets()[0].flatten());
    assert_eq!(p.perturb_targets()[1].flatten(), p.perturb_nets()[1].flatten());
}

#[test]
fn cross_agent_gradients_follow_the_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let critic = CentralCritic::<f64>::new(3, 3 * ACT, 0, &[16], Activation::Tanh, &mut rng);
    let rows = 6;
    let batch = PolicyBatch {
        states: Tensor::from_rows(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect()),
        obs: (0..3)
            .map(|_| Tensor::from_rows(rows, OBS, (0..rows * OBS).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect(),
        base: (0..3).map(|_| Tensor::zeros(rows, ACT)).collect(),
    };
    let n = gradient_aggregation_check(&policy(3, Variant::N, 1.0, 0), &critic, &batch).unwrap();
    let a = gradient_aggregation_check(&policy(3, Variant::A, 1.0, 0), &critic, &batch).unwrap();
    for i in 0..3 {
        assert!(n[i][i] > 0.0);
        for k in (0..3).filter(|&k| k != i) {
            assert_eq!(n[i][k], 0.0);
            assert!(a[i][k] > 0.0);
        }
    }

    let single = DecomPolicy::new(
        PolicyConfig {
            neighbors: vec![vec![]],
            ..config(1, Variant::A, 1.0, BaseMode::Deterministic)
        },
        &mut rng,
    )
    .unwrap();
    let c1 = CentralCritic::<f64>::new(3, ACT, 0, &[8], Activation::Tanh, &mut rng);
    let b1 = PolicyBatch {
        states: batch.states.clone(),
        obs: vec![batch.obs[0].clone()],
        base: vec![batch.base[0].clone()],
    };
    let m = gradient_aggregation_check(&single, &c1, &b1).unwrap();
    assert_eq!((m.len(), m[0].len()), (1, 1));
}
