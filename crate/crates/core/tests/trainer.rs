use decom::config::AlgoKind;
use decom::env::EnvKind;
use decom::trainer::{
    train, validate_lr_schedule, write_metrics_csv, LrSchedule, LrSchedules, ReplayBuffer, ScheduleClass,
};
use decom::{ExperimentConfig, Trainer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(variant: AlgoKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(EnvKind::CtcSafe);
    c.env.ctc.n_hunters = 2;
    c.env.ctc.episode_len = 10;
    c.env.ctc.n_unsafe = 1;
    c.env.bounds = vec![0.6];
    c.algo.variant = variant;
    c.algo.hidden = vec![8];
    c.algo.batch_size = 16;
    c.algo.buffer_capacity = 1000;
    c.algo.train_every = 1;
    c.algo.updates_per_train = 1;
    c.algo.inner_iterations = 3;
    c.run.episodes = 6;
    c.run.eval_interval = 3;
    c.run.eval_episodes = 2;
    c.run.seeds = vec![0];
    c
}

fn iterate(t: &mut Trainer, episodes: usize) -> usize {
    let mut done = 0;
    for _ in 0..episodes {
        t.collect().unwrap();
        if t.train_iteration().unwrap().is_some() {
            done += 1;
        }
    }
    done
}

#[test]
fn every_iteration_updates_each_group_once() {
    let cfg = small(AlgoKind::DecomA);
    let mut t = Trainer::<f64>::new(cfg.clone(), 1).unwrap();
    let k = iterate(&mut t, 8) as u64;
    assert!(k >= 5);
    let c = t.counters();
    assert_eq!(c.iterations, k);
    assert_eq!(c.reward_critic_steps, k);
    assert_eq!(c.cost_critic_steps, k);
    assert_eq!(c.theta_steps, k);
    assert_eq!(c.inner_loop_calls, k);
    assert_eq!(c.phi_steps, 3 * k);
    assert_eq!(c.reward_target_updates, k);
    assert_eq!(c.cost_target_updates, k);
    assert_eq!(c.base_target_updates, k);
    assert_eq!(c.perturb_target_updates, k);
}

#[test]
fn penalty_baselines_never_run_the_inner_loop() {
    for v in [AlgoKind::Fp, AlgoKind::Lagrangian] {
        let mut t = Trainer::<f64>::new(small(v), 2).unwrap();
        let k = iterate(&mut t, 6) as u64;
        let c = t.counters();
        assert!(k > 0);
        assert_eq!((c.inner_loop_calls, c.phi_steps, c.cost_critic_steps), (0, 0, 0), "{v}");
        assert_eq!(c.theta_steps, k);
        assert!(t.last_iteration().phi_loss.is_nan());
    }
}

#[test]
fn zero_cost_leaves_perturbation_untouched() {
    let mut cfg = small(AlgoKind::DecomA);
    cfg.env.ctc.n_unsafe = 1;
    cfg.env.ctc.unsafe_centers = Some(vec![[10.0, 10.0]]);
    cfg.env.ctc.unsafe_diameters = Some(vec![0.2]);
    let mut t = Trainer::<f64>::new(cfg, 3).unwrap();
    let before = t.policy().perturb_flat();
    assert!(iterate(&mut t, 8) > 0);
    assert_eq!(t.last_iteration().grad_norm_phi, 0.0);
    assert_eq!(t.policy().perturb_flat(), before);
}

#[test]
fn runs_are_reproducible() {
    let run = || {
        let mut t = Trainer::<f64>::new(small(AlgoKind::DecomA), 7).unwrap();
        let rows = t.run(None, |_| {}).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, 1, &rows).unwrap();
        buf
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
}

#[test]
fn zero_episodes_writes_header_only() {
    let mut cfg = small(AlgoKind::DecomA);
    cfg.run.episodes = 0;
    let dir = std::env::temp_dir().join(format!("decom-zero-{}", std::process::id()));
    let s = train(&cfg, &dir, |_| {}).unwrap();
    assert!(s.rows.is_empty());
    let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(dir.join("config.resolved").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn empty_seed_list_is_rejected_before_writing() {
    let mut cfg = small(AlgoKind::Fp);
    cfg.run.seeds.clear();
    let dir = std::env::temp_dir().join(format!("decom-noseed-{}", std::process::id()));
    assert!(train(&cfg, &dir, |_| {}).is_err());
    assert!(!dir.exists());
}

#[test]
fn schedule_examples() {
    let poly = |p: f64| LrSchedule::Polynomial { scale: 1e-3, offset: 1.0, power: p };
    let s = |r, c, b, p| LrSchedules { reward_critic: r, cost_critic: c, base: b, perturb: p };
    let class = |x| validate_lr_schedule(&x).unwrap().class();
    assert_eq!(class(s(poly(0.6), poly(0.6), poly(1.0), poly(0.8))), ScheduleClass::Conforming);
    assert_eq!(class(s(poly(0.6), poly(0.6), poly(0.8), poly(0.8))), ScheduleClass::Violating);
    assert_eq!(class(s(poly(0.4), poly(0.6), poly(1.0), poly(0.8))), ScheduleClass::Violating);
    let c = LrSchedule::constant(1e-3);
    assert_eq!(class(s(c, c, c, c)), ScheduleClass::PracticalNonConforming);
}

proptest! {
    #[test]
    fn buffer_keeps_the_newest_items(cap in 1usize..40, n in 0usize..120, k in 1usize..10) {
        let mut b = ReplayBuffer::new(cap).unwrap();
        for i in 0..n {
            b.push(i);
        }
        prop_assert_eq!(b.len(), n.min(cap));
        prop_assert_eq!(b.pushed(), n as u64);
        let kept: Vec<usize> = b.iter_ordered().copied().collect();
        prop_assert_eq!(kept, (n.saturating_sub(cap)..n).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        if k <= b.len() {
            let mut got: Vec<usize> = b.sample(k, &mut rng).unwrap().into_iter().copied().collect();
            prop_assert!(got.iter().all(|v| *v >= n.saturating_sub(cap) && *v < n));
            got.sort_unstable();
            got.dedup();
            prop_assert_eq!(got.len(), k);
        } else {
            prop_assert!(b.sample(k, &mut rng).is_err());
        }
    }
}
