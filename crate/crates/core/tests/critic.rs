use decom::critic::{CentralCritic, TdBatch};
use decom::nn::{Activation, Layer, Mlp};
use decom::verify::{tabular_critic_error, TabularMdp};
use decom::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `Q(s, a) = w·[s, a] + b` with one state and one action dimension.
fn linear_critic(w: [f64; 2], b: f64) -> CentralCritic<f64> {
    let net = Mlp::from_layers(vec![Layer {
        weight: Tensor::from_rows(2, 1, w.to_vec()),
        bias: Tensor::row(vec![b]),
        activation: Activation::Identity,
    }])
    .unwrap();
    CentralCritic::from_net(1, 1, 0, net).unwrap()
}

fn batch(s: &[f64], a: &[f64], r: &[f64], s2: &[f64], a2: &[f64], done: &[bool]) -> TdBatch<f64> {
    let n = s.len();
    TdBatch {
        states: Tensor::from_rows(n, 1, s.to_vec()),
        actions: Tensor::from_rows(n, 1, a.to_vec()),
        rewards: r.to_vec(),
        costs: vec![r.to_vec()],
        next_states: Tensor::from_rows(n, 1, s2.to_vec()),
        next_actions: Tensor::from_rows(n, 1, a2.to_vec()),
        done: done.to_vec(),
    }
}

#[test]
fn hand_computed_two_transition_loss() {
    let c = linear_critic([0.5, -1.0], 0.25);
    let b = batch(&[1.0, -2.0], &[0.5, 0.0], &[1.0, 3.0], &[0.0, 1.0], &[1.0, -1.0], &[false, true]);
    // Q(1, .5) = .25, Q(-2, 0) = -.75; Q'(0, 1) = -.75.
    // Targets: 1 + .9·(−.75) = .325 and 3 (terminal).
    let expected = ((0.325f64 - 0.25).powi(2) + (3.0f64 + 0.75).powi(2)) / 2.0;
    let l = c.reward_td_loss(&b, 0.9).unwrap();
    assert!((l.loss - expected).abs() <= 1e-12, "{} vs {expected}", l.loss);
}

#[test]
fn zero_discount_is_plain_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = CentralCritic::<f64>::new(1, 1, 0, &[8], Activation::Tanh, &mut rng);
    let b = batch(&[0.1, 0.2, -0.4], &[0.3, -0.3, 0.9], &[1.0, 0.0, -2.0], &[0.0; 3], &[0.0; 3], &[false; 3]);
    let q = c.q_batch(&b.states, &b.actions, None, false).unwrap();
    let expected = q.data().iter().zip(&b.rewards).map(|(q, r)| (r - q).powi(2)).sum::<f64>() / 3.0;
    assert!((c.reward_td_loss(&b, 0.0).unwrap().loss - expected).abs() <= 1e-12);
}

#[test]
fn reward_and_cost_channels_agree_on_identical_signals() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = CentralCritic::<f64>::new(1, 1, 0, &[8], Activation::Tanh, &mut rng);
    let b = batch(&[0.1, 0.2], &[0.3, -0.3], &[1.0, 0.5], &[0.0, 0.4], &[0.2, 0.1], &[false, false]);
    let r = c.reward_td_loss(&b, 0.95).unwrap();
    let k = c.cost_td_loss(&b, 0, 0.95).unwrap();
    assert_eq!(r.loss, k.loss);
    assert_eq!(r.grads, k.grads);
}

#[test]
fn zero_critic_on_zero_costs_has_zero_loss() {
    let mut c = linear_critic([0.3, 0.3], 0.1);
    c.zero_output_layer();
    let mut b = batch(&[0.1, 0.2], &[0.3, -0.3], &[0.0, 0.0], &[0.0, 0.4], &[0.2, 0.1], &[false, false]);
    b.costs = vec![vec![0.0, 0.0]];
    assert_eq!(c.cost_td_loss(&b, 0, 1.0).unwrap().loss, 0.0);
}

#[test]
fn perfect_critic_on_one_step_problem_has_zero_loss() {
    // Q(s, a) = s + 2a matches r = s + 2a on terminal transitions.
    let c = linear_critic([1.0, 2.0], 0.0);
    let s = [0.1, -0.5, 0.7];
    let a = [0.2, 0.3, -0.9];
    let r: Vec<f64> = s.iter().zip(&a).map(|(s, a)| s + 2.0 * a).collect();
    let b = batch(&s, &a, &r, &[0.0; 3], &[0.0; 3], &[true; 3]);
    assert!(c.reward_td_loss(&b, 0.99).unwrap().loss <= 1e-30);
}

#[test]
fn two_half_updates_give_three_quarters() {
    let mut c = linear_critic([0.0, 0.0], 0.0);
    c.net_mut().assign_flat(&[1.0, 1.0, 1.0]).unwrap();
    let mut t = c.clone();
    t.net_mut().assign_flat(&[0.0; 3]).unwrap();
    t.soft_update(1.0).unwrap();
    t.net_mut().assign_flat(&[1.0; 3]).unwrap();
    t.soft_update(0.5).unwrap();
    t.soft_update(0.5).unwrap();
    assert_eq!(t.target().flatten(), vec![0.75; 3]);
}

#[test]
fn tabular_critic_reaches_the_linear_solve() {
    let (err, used) = tabular_critic_error(0, 50_000).unwrap();
    assert!(err <= 1e-2, "error {err} after {used}");
}

#[test]
fn analytic_tabular_values_satisfy_bellman() {
    let m = TabularMdp::default();
    let q = m.analytic_q();
    for s in 0..2 {
        for a in 0..2 {
            let p1 = m.p1[s][a];
            let next = (1.0 - p1) * q[0][m.policy[0]] + p1 * q[1][m.policy[1]];
            assert!((q[s][a] - (m.reward[s][a] + m.gamma * next)).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn td_loss_is_nonnegative_and_zero_only_at_zero_residual(seed in 0u64..10_000, gamma in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = CentralCritic::<f64>::new(2, 2, 0, &[8], Activation::LeakyRelu, &mut rng);
        let n = 5;
        let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut b = TdBatch {
            states: Tensor::from_rows(n, 2, v(2 * n)),
            actions: Tensor::from_rows(n, 2, v(2 * n)),
            rewards: v(n),
            costs: vec![],
            next_states: Tensor::from_rows(n, 2, v(2 * n)),
            next_actions: Tensor::from_rows(n, 2, v(2 * n)),
            done: vec![false; n],
        };
        prop_assert!(c.reward_td_loss(&b, gamma).unwrap().loss > 0.0);
        // Rewards that make every residual vanish.
        let q = c.q_batch(&b.states, &b.actions, None, false).unwrap();
        let q2 = c.q_batch(&b.next_states, &b.next_actions, None, true).unwrap();
        b.rewards = q.data().iter().zip(q2.data()).map(|(q, q2)| q - gamma * q2).collect();
        prop_assert!(c.reward_td_loss(&b, gamma).unwrap().loss <= 1e-28);
    }

    #[test]
    fn td_gradient_treats_the_target_as_constant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = CentralCritic::<f64>::new(1, 1, 0, &[4], Activation::Tanh, &mut rng);
        let b = batch(&[0.2, -0.6], &[0.1, 0.5], &[1.0, -1.0], &[0.3, 0.2], &[-0.4, 0.8], &[false, false]);
        let g: Vec<f64> = c.reward_td_loss(&b, 0.9).unwrap().grads.iter().flat_map(|t| t.data().to_vec()).collect();
        let theta = c.net().flatten();
        prop_assert_eq!(g.len(), theta.len());
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut probe = c.clone();
            let mut p = theta.clone();
            p[k] += h;
            probe.net_mut().assign_flat(&p).unwrap();
            let plus = probe.reward_td_loss(&b, 0.9).unwrap().loss;
            p[k] -= 2.0 * h;
            probe.net_mut().assign_flat(&p).unwrap();
            let minus = probe.reward_td_loss(&b, 0.9).unwrap().loss;
            let fd = (plus - minus) / (2.0 * h);
            prop_assert!((g[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {}: {} vs {}", k, g[k], fd);
        }
    }
}
