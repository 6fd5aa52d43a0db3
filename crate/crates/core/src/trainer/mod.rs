//! Training loop: rollouts, critic updates, base and perturbation updates,
//! target blending, evaluation and run artifacts.

pub mod buffer;
mod rollout;
pub mod schedule;
mod updates;

pub use buffer::{ReplayBuffer, Transition};
pub use rollout::{collect_episode, write_trajectory_csv, EpisodeStats, StepRecord};
pub use schedule::{
    validate_lr_schedule, Group, LrSchedule, LrSchedules, ScheduleClass, ScheduleIssue, ScheduleReport, TargetRate,
};
pub use updates::{
    deterministic_surrogate, fp_shaped_reward, gradient_aggregation_check, lagrangian_update, stochastic_surrogate,
    ActionValue, PhiObjective, PolicyBatch, StepGroup, Surrogate, ViolationBatch,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{AlgoKind, ExperimentConfig, PhiOptimizer};
use crate::constraint::{run_inner_loop, select_worst_constraint, ConstraintSpec, ViolationObjective};
use crate::critic::{CentralCritic, TdBatch};
use crate::env::{Ccmg, CcmgSpec};
use crate::error::{Error, Result};
use crate::optim::{clip_vector, project_box, AdamConfig, AdamState};
use crate::policy::{BaseMode, DecomPolicy, Exploration, PolicyConfig, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How many times each update of one training iteration ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    pub iterations: u64,
    pub reward_critic_steps: u64,
    pub cost_critic_steps: u64,
    pub theta_steps: u64,
    pub phi_steps: u64,
    pub inner_loop_calls: u64,
    pub reward_target_updates: u64,
    pub cost_target_updates: u64,
    pub base_target_updates: u64,
    pub perturb_target_updates: u64,
}

/// Diagnostics of the latest training iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationStats {
    pub td_loss_r: f64,
    pub td_loss_c: f64,
    /// Worst combined violation before the perturbation update.
    pub phi_loss: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
}

/// Evaluation summary over noise-free episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub episodes: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub cost_mean: Vec<f64>,
    pub cost_std: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl EvalStats {
    pub fn from_episodes(eps: &[EpisodeStats], m: usize) -> Self {
        let (reward_mean, reward_std) = mean_std(&eps.iter().map(|e| e.discounted_reward).collect::<Vec<_>>());
        let (cost_mean, cost_std) = (0..m)
            .map(|j| mean_std(&eps.iter().map(|e| e.discounted_costs[j]).collect::<Vec<_>>()))
            .unzip();
        Self {
            episodes: eps.len(),
            reward_mean,
            reward_std,
            cost_mean,
            cost_std,
        }
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub episode: usize,
    pub seed: u64,
    pub variant: String,
    pub eval: EvalStats,
    pub violations: Vec<f64>,
    pub iteration: IterationStats,
}

pub fn metrics_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = ["episode", "seed", "variant", "reward_mean", "reward_std"]
        .map(String::from)
        .to_vec();
    h.extend((1..=m).map(|j| format!("cost_{j}")));
    h.extend((1..=m).map(|j| format!("violation_{j}")));
    h.extend(
        ["td_loss_r", "td_loss_c", "phi_loss", "grad_norm_theta", "grad_norm_phi"].map(String::from),
    );
    h
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.episode.to_string(),
            self.seed.to_string(),
            self.variant.clone(),
            self.eval.reward_mean.to_string(),
            self.eval.reward_std.to_string(),
        ];
        r.extend(self.eval.cost_mean.iter().map(f64::to_string));
        r.extend(self.violations.iter().map(f64::to_string));
        let it = &self.iteration;
        r.extend([it.td_loss_r, it.td_loss_c, it.phi_loss, it.grad_norm_theta, it.grad_norm_phi].map(|v| v.to_string()));
        r
    }
}

/// Label used in the metrics `variant` column.
pub fn variant_label(cfg: &ExperimentConfig) -> String {
    match cfg.algo.variant {
        AlgoKind::Fp => format!("fp({})", cfg.algo.fp_weight),
        k => k.to_string(),
    }
}

fn split_cols<S: Scalar>(rows: &[&[f64]], n: usize, width: usize) -> Vec<Tensor<S>> {
    (0..n)
        .map(|i| {
            let data = rows
                .iter()
                .flat_map(|r| r[i * width..(i + 1) * width].iter().map(|&v| S::cast(v)))
                .collect();
            Tensor::from_rows(rows.len(), width, data)
        })
        .collect()
}

fn stack<S: Scalar>(rows: &[&[f64]]) -> Tensor<S> {
    let cols = rows.first().map_or(0, |r| r.len());
    Tensor::from_rows(rows.len(), cols, rows.iter().flat_map(|r| r.iter().map(|&v| S::cast(v))).collect())
}

/// Single-seed trainer state.
pub struct Trainer<S: Scalar = f64> {
    cfg: ExperimentConfig,
    seed: u64,
    env: Box<dyn Ccmg>,
    spec: CcmgSpec,
    policy: DecomPolicy<S>,
    reward_critic: CentralCritic<S>,
    cost_critics: Vec<CentralCritic<S>>,
    reward_opt: AdamState<S>,
    cost_opts: Vec<AdamState<S>>,
    base_opts: Vec<AdamState<S>>,
    perturb_opt: Option<AdamState<S>>,
    buffer: ReplayBuffer<Transition>,
    initial: ReplayBuffer<Transition>,
    explore: Exploration<S>,
    rng: ChaCha8Rng,
    multipliers: Vec<f64>,
    recent_costs: Vec<Vec<f64>>,
    counters: UpdateCounters,
    episode: usize,
    last: IterationStats,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.env.build()?;
        let spec = env.spec().clone();
        let a = &cfg.algo;
        let m = spec.cost_count;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (variant, lambda) = match a.variant.decom_variant() {
            Some(v) => (v, a.lambda),
            None => (Variant::A, 0.0),
        };
        let pcfg = PolicyConfig {
            obs_dim: spec.obs_dim,
            action_dim: spec.action_dim,
            action_low: spec.action_low,
            action_high: spec.action_high,
            neighbors: spec.neighbors.clone(),
            hidden: a.hidden.clone(),
            hidden_activation: a.actor_activation,
            base_mode: a.base_mode,
            variant,
            lambda,
        };
        let policy = DecomPolicy::new(pcfg.clone(), &mut rng)?;
        let joint = spec.joint_action_dim();
        let reward_critic = CentralCritic::new(spec.state_dim, joint, 0, &a.hidden, a.critic_activation, &mut rng);
        let mut cost_critics: Vec<CentralCritic<S>> = if a.shared_cost_critic {
            vec![CentralCritic::new(spec.state_dim, joint, m, &a.hidden, a.critic_activation, &mut rng)]
        } else {
            (0..m)
                .map(|_| CentralCritic::new(spec.state_dim, joint, 0, &a.hidden, a.critic_activation, &mut rng))
                .collect()
        };
        // Cost critics start at exactly zero so that zero costs never produce a violation.
        for c in &mut cost_critics {
            c.zero_output_layer();
        }
        let adam = |ps: Vec<&Tensor<S>>, lr: f64| AdamState::new(&ps, AdamConfig::with_lr(lr));
        let reward_opt = adam(reward_critic.net().params(), a.lr.reward_critic.rate(0));
        let cost_opts = cost_critics
            .iter()
            .map(|c| adam(c.net().params(), a.lr.cost_critic.rate(0)))
            .collect();
        let base_opts = policy
            .base_nets()
            .iter()
            .map(|n| adam(n.params(), a.lr.base.rate(0)))
            .collect();
        let perturb_opt = (a.phi_optimizer == PhiOptimizer::Adam).then(|| {
            let flat = Tensor::row(policy.perturb_flat());
            AdamState::new(&[&flat], AdamConfig::with_lr(a.lr.perturb.rate(0)))
        });
        let explore = Exploration::new(
            &pcfg,
            a.exploration.ou_rate,
            a.exploration.base_volatility,
            a.exploration.perturb_volatility,
            seed,
        );
        let buffer = ReplayBuffer::new(a.buffer_capacity)?;
        let initial = ReplayBuffer::new((a.buffer_capacity / spec.episode_len.max(1)).max(1))?;
        Ok(Self {
            multipliers: vec![0.0; m],
            recent_costs: Vec::new(),
            seed,
            env,
            spec,
            policy,
            reward_critic,
            cost_critics,
            reward_opt,
            cost_opts,
            base_opts,
            perturb_opt,
            buffer,
            initial,
            explore,
            rng,
            counters: UpdateCounters::default(),
            episode: 0,
            last: IterationStats::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &CcmgSpec {
        &self.spec
    }

    pub fn policy(&self) -> &DecomPolicy<S> {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut DecomPolicy<S> {
        &mut self.policy
    }

    pub fn reward_critic(&self) -> &CentralCritic<S> {
        &self.reward_critic
    }

    pub fn cost_critics(&self) -> &[CentralCritic<S>] {
        &self.cost_critics
    }

    pub fn counters(&self) -> UpdateCounters {
        self.counters
    }

    pub fn buffer(&self) -> &ReplayBuffer<Transition> {
        &self.buffer
    }

    pub fn episodes_done(&self) -> usize {
        self.episode
    }

    pub fn multipliers(&self) -> &[f64] {
        &self.multipliers
    }

    pub fn last_iteration(&self) -> &IterationStats {
        &self.last
    }

    fn episode_seed(&self, episode: usize, eval: bool) -> u64 {
        let base = self.seed.wrapping_mul(0x0010_0000_01B3).wrapping_add(episode as u64);
        if eval {
            base ^ 0x5EED_0000_0000_0000
        } else {
            base
        }
    }

    /// One exploratory training episode, stored in the replay buffer.
    pub fn collect(&mut self) -> Result<EpisodeStats> {
        let seed = self.episode_seed(self.episode, false);
        let (buffer, initial) = (&mut self.buffer, &mut self.initial);
        let stats = collect_episode(
            self.env.as_mut(),
            &self.policy,
            Some(&mut self.explore),
            &mut self.rng,
            seed,
            &mut |tr, _| {
                if tr.t == 0 {
                    initial.push(tr.clone());
                }
                buffer.push(tr);
            },
        )?;
        self.episode += 1;
        self.recent_costs.push(stats.discounted_costs.clone());
        Ok(stats)
    }

    /// Noise-free episodes with seeds disjoint from training.
    pub fn evaluate(&mut self, episodes: usize, keep_steps: bool) -> Result<(EvalStats, Vec<Vec<StepRecord>>)> {
        let mut eps = Vec::with_capacity(episodes);
        let mut steps = Vec::new();
        for k in 0..episodes {
            let seed = self.episode_seed(k, true);
            let mut recs = Vec::new();
            let s = collect_episode(self.env.as_mut(), &self.policy, None, &mut self.rng, seed, &mut |_, r| {
                if keep_steps {
                    recs.push(r)
                }
            })?;
            eps.push(s);
            if keep_steps {
                steps.push(recs);
            }
        }
        Ok((EvalStats::from_episodes(&eps, self.spec.cost_count), steps))
    }

    fn shaped_reward(&self, tr: &Transition) -> f64 {
        match self.cfg.algo.variant {
            AlgoKind::Fp => fp_shaped_reward(tr.reward, &tr.costs, self.cfg.algo.fp_weight),
            AlgoKind::Lagrangian => {
                tr.reward - self.multipliers.iter().zip(&tr.costs).map(|(l, c)| l * c).sum::<f64>()
            }
            _ => tr.reward,
        }
    }

    fn td_batch(&self, sample: &[&Transition]) -> Result<TdBatch<S>> {
        let n = self.spec.n_agents;
        let next_obs: Vec<&[f64]> = sample.iter().map(|t| t.next_obs.as_slice()).collect();
        let next_actions = self.policy.act_batch(&split_cols(&next_obs, n, self.spec.obs_dim), true)?;
        Ok(TdBatch {
            states: stack(&sample.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>()),
            actions: stack(&sample.iter().map(|t| t.action.as_slice()).collect::<Vec<_>>()),
            rewards: sample.iter().map(|t| S::cast(self.shaped_reward(t))).collect(),
            costs: (0..self.spec.cost_count)
                .map(|j| sample.iter().map(|t| S::cast(t.costs[j])).collect())
                .collect(),
            next_states: stack(&sample.iter().map(|t| t.next_state.as_slice()).collect::<Vec<_>>()),
            next_actions,
            done: sample.iter().map(|t| t.done).collect(),
        })
    }

    fn policy_batch(&self, sample: &[&Transition]) -> PolicyBatch<S> {
        let n = self.spec.n_agents;
        let obs: Vec<&[f64]> = sample.iter().map(|t| t.obs.as_slice()).collect();
        let base: Vec<&[f64]> = sample.iter().map(|t| t.base.as_slice()).collect();
        PolicyBatch {
            states: stack(&sample.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>()),
            obs: split_cols(&obs, n, self.spec.obs_dim),
            base: split_cols(&base, n, self.spec.action_dim),
        }
    }

    fn violation_batch(&mut self, sample: &[&Transition]) -> Result<ViolationBatch<S>> {
        let n0 = self.cfg.algo.batch_size.min(self.initial.len());
        let init = self.initial.sample(n0, &mut self.rng)?;
        let per_step = self.cfg.algo.per_step_estimator && self.cfg.algo.cost_gamma == 1.0;
        let rows: Vec<&Transition> = if per_step {
            init.iter().chain(sample.iter()).copied().collect()
        } else {
            init.clone()
        };
        let m = self.spec.cost_count;
        let mut groups: Vec<StepGroup<S>> = Vec::new();
        if per_step {
            let mut by_t: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (k, t) in sample.iter().enumerate() {
                by_t.entry(t.t).or_default().push(n0 + k);
            }
            for (t, idx) in by_t {
                let head = (0..m)
                    .map(|j| {
                        let k = idx.len() as f64;
                        let p = idx.iter().map(|&r| rows[r].cost_prefix[j]).sum::<f64>() / k;
                        let c = idx.iter().map(|&r| rows[r].costs[j]).sum::<f64>() / k;
                        S::cast(p - c)
                    })
                    .collect();
                groups.push(StepGroup { t, rows: idx, head });
            }
        }
        // The violation is measured for the current base policy, so stored
        // (behavior) base actions are replaced by fresh ones.
        let pb = self.policy_batch(&rows);
        let base = match self.cfg.algo.base_mode {
            BaseMode::Gaussian => self.policy.base_batch(&pb.obs, Some(&mut self.rng))?,
            BaseMode::Deterministic => self.policy.base_batch::<ChaCha8Rng>(&pb.obs, None)?,
        };
        Ok(ViolationBatch {
            states: pb.states,
            obs: pb.obs,
            base,
            initial_rows: n0,
            groups,
        })
    }

    fn constraint_spec(&self) -> ConstraintSpec {
        let a = &self.cfg.algo;
        ConstraintSpec {
            bounds: self.cfg.env.bounds.clone(),
            inner_iterations: a.inner_iterations,
            step_size: a.lr.perturb.rate(self.counters.iterations),
            clip_norm: a.clip_norm,
            box_half_width: a.box_half_width,
        }
    }

    /// Perturbation update: `W` clipped projected steps on the worst violation.
    fn update_phi(&mut self, sample: &[&Transition]) -> Result<(f64, f64)> {
        let vb = self.violation_batch(sample)?;
        let cspec = self.constraint_spec();
        let phi0 = self.policy.perturb_flat();
        let mut obj = PhiObjective::new(&self.policy, &self.cost_critics, &cspec.bounds, &vb)?;
        let (phi, first_loss, first_norm) = match self.perturb_opt.as_mut() {
            None => {
                let res = run_inner_loop(&mut obj, &phi0, &cspec)?;
                let s0 = &res.steps[0];
                (res.phi, s0.losses[s0.worst].as_f64(), s0.grad_norm.as_f64())
            }
            Some(opt) => {
                opt.config.lr = cspec.step_size;
                let mut flat = Tensor::row(phi0);
                let mut first = None;
                for _ in 0..cspec.inner_iterations {
                    let losses = obj.losses(flat.data())?;
                    let j = select_worst_constraint(&losses)?;
                    let g = obj.gradient(flat.data(), j)?;
                    let c = clip_vector(&g, S::cast(cspec.clip_norm))?;
                    first.get_or_insert((losses[j].as_f64(), c.norm.as_f64()));
                    opt.step(vec![&mut flat], &[Tensor::row(c.grads)])?;
                    project_box(flat.data_mut(), S::cast(cspec.box_half_width));
                }
                let (l, g) = first.expect("at least one inner iteration");
                (flat.into_data(), l, g)
            }
        };
        drop(obj);
        self.policy.assign_perturb_flat(&phi)?;
        self.counters.inner_loop_calls += 1;
        self.counters.phi_steps += cspec.inner_iterations as u64;
        Ok((first_loss, first_norm))
    }

    fn update_theta(&mut self, sample: &[&Transition]) -> Result<f64> {
        let pb = self.policy_batch(sample);
        let sur = match self.cfg.algo.base_mode {
            BaseMode::Deterministic => deterministic_surrogate(&self.policy, &self.reward_critic, &pb)?,
            BaseMode::Gaussian => {
                let noise = self.policy.solve_noise(&pb.obs, &pb.base)?;
                stochastic_surrogate(&self.policy, &self.reward_critic, &pb, &noise, None)?
            }
        };
        let lr = self.cfg.algo.lr.base.rate(self.counters.iterations);
        for ((net, opt), g) in self.policy.base_nets_mut().iter_mut().zip(&mut self.base_opts).zip(&sur.grads) {
            opt.config.lr = lr;
            let neg: Vec<Tensor<S>> = g.iter().map(|t| t.scale(-S::one())).collect();
            opt.step(net.params_mut(), &neg)?;
        }
        self.counters.theta_steps += 1;
        Ok(sur.grad_norm.as_f64())
    }

    fn update_critics(&mut self, batch: &TdBatch<S>) -> Result<(f64, f64)> {
        let a = &self.cfg.algo;
        let k = self.counters.iterations;
        let gamma = S::cast(a.gamma);
        let cg = S::cast(a.cost_gamma);
        let r = self.reward_critic.reward_td_loss(batch, gamma)?;
        self.reward_opt.config.lr = a.lr.reward_critic.rate(k);
        self.reward_opt.step(self.reward_critic.net_mut().params_mut(), &r.grads)?;
        self.counters.reward_critic_steps += 1;
        let mut cost_losses = Vec::new();
        let shared = self.cost_critics.len() == 1 && self.cost_critics[0].index_width() > 0;
        for (j, (c, opt)) in self.cost_critics.iter_mut().zip(&mut self.cost_opts).enumerate() {
            let l = if shared {
                c.shared_cost_td_loss(batch, cg)?
            } else {
                c.cost_td_loss(batch, j, cg)?
            };
            opt.config.lr = a.lr.cost_critic.rate(k);
            opt.step(c.net_mut().params_mut(), &l.grads)?;
            cost_losses.push(l.loss.as_f64());
            self.counters.cost_critic_steps += 1;
        }
        Ok((r.loss.as_f64(), cost_losses.iter().sum::<f64>() / cost_losses.len() as f64))
    }

    fn soft_updates(&mut self) -> Result<()> {
        let t = &self.cfg.algo.targets;
        let (e, total, f) = (self.episode, self.cfg.run.episodes, t.decay_fraction);
        self.reward_critic.soft_update(t.reward_critic.at(e, total, f))?;
        self.counters.reward_target_updates += 1;
        if self.cfg.algo.variant.uses_constraint_solver() {
            for c in &mut self.cost_critics {
                c.soft_update(t.cost_critic.at(e, total, f))?;
            }
            self.counters.cost_target_updates += 1;
        }
        self.policy
            .soft_update_targets(t.base.at(e, total, f), t.perturb.at(e, total, f))?;
        self.counters.base_target_updates += 1;
        self.counters.perturb_target_updates += 1;
        Ok(())
    }

    /// One pass of critic, base and perturbation updates on a fresh mini-batch.
    /// Returns `None` while the buffer holds less than one batch.
    pub fn train_iteration(&mut self) -> Result<Option<IterationStats>> {
        let bs = self.cfg.algo.batch_size;
        if self.buffer.len() < bs || self.initial.is_empty() {
            return Ok(None);
        }
        let idx = self.buffer.sample_indices(bs, &mut self.rng)?;
        let owned: Vec<Transition> = idx.iter().map(|&i| self.buffer.get(i).expect("index in range").clone()).collect();
        let sample: Vec<&Transition> = owned.iter().collect();
        let decom = self.cfg.algo.variant.uses_constraint_solver();

        let td = self.td_batch(&sample)?;
        let mut stats = IterationStats {
            td_loss_c: f64::NAN,
            phi_loss: f64::NAN,
            grad_norm_phi: f64::NAN,
            ..IterationStats::default()
        };
        if decom {
            let (lr, lc) = self.update_critics(&td)?;
            stats.td_loss_r = lr;
            stats.td_loss_c = lc;
        } else {
            let k = self.counters.iterations;
            let r = self.reward_critic.reward_td_loss(&td, S::cast(self.cfg.algo.gamma))?;
            self.reward_opt.config.lr = self.cfg.algo.lr.reward_critic.rate(k);
            self.reward_opt.step(self.reward_critic.net_mut().params_mut(), &r.grads)?;
            self.counters.reward_critic_steps += 1;
            stats.td_loss_r = r.loss.as_f64();
        }
        stats.grad_norm_theta = self.update_theta(&sample)?;
        if decom && self.policy.lambda() > 0.0 {
            let (l, g) = self.update_phi(&sample)?;
            stats.phi_loss = l;
            stats.grad_norm_phi = g;
        }
        if self.cfg.algo.variant == AlgoKind::Lagrangian && !self.recent_costs.is_empty() {
            let m = self.spec.cost_count;
            let est: Vec<f64> = (0..m)
                .map(|j| self.recent_costs.iter().map(|c| c[j]).sum::<f64>() / self.recent_costs.len() as f64)
                .collect();
            self.multipliers = lagrangian_update(&self.multipliers, &est, &self.cfg.env.bounds, self.cfg.algo.multiplier_rate)?;
            self.recent_costs.clear();
        }
        self.soft_updates()?;
        self.counters.iterations += 1;
        self.last = stats.clone();
        Ok(Some(stats))
    }

    /// Policy and critics, online and target.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.policy.save_into(&mut ck)?;
        self.reward_critic.save_into(&mut ck, "reward_critic")?;
        for (j, c) in self.cost_critics.iter().enumerate() {
            c.save_into(&mut ck, &format!("cost_critic_{j}"))?;
        }
        Ok(ck)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.policy.load_from(ck)?;
        self.reward_critic.load_from(ck, "reward_critic")?;
        for (j, c) in self.cost_critics.iter_mut().enumerate() {
            c.load_from(ck, &format!("cost_critic_{j}"))?;
        }
        Ok(())
    }

    fn metrics_row(&self, eval: EvalStats) -> MetricsRow {
        let violations = eval
            .cost_mean
            .iter()
            .zip(&self.cfg.env.bounds)
            .map(|(c, d)| (c - d).max(0.0))
            .collect();
        MetricsRow {
            episode: self.episode,
            seed: self.seed,
            variant: variant_label(&self.cfg),
            eval,
            violations,
            iteration: self.last.clone(),
        }
    }

    /// Runs every configured episode; evaluates every `eval_interval` episodes
    /// and after the last one. Artifacts go to `dir` when given.
    pub fn run(&mut self, dir: Option<&Path>, mut on_row: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>> {
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
        }
        let total = self.cfg.run.episodes;
        let mut rows = Vec::new();
        while self.episode < total {
            self.collect()?;
            if self.episode % self.cfg.algo.train_every == 0 {
                for _ in 0..self.cfg.algo.updates_per_train {
                    self.train_iteration()?;
                }
            }
            if self.episode % self.cfg.run.eval_interval == 0 || self.episode == total {
                let dump = self.cfg.run.dump_trajectories && dir.is_some();
                let (eval, steps) = self.evaluate(self.cfg.run.eval_episodes, dump)?;
                let row = self.metrics_row(eval);
                on_row(&row);
                if let Some(d) = dir {
                    if dump {
                        let f = fs::File::create(d.join(format!("trajectories_ep{}.csv", self.episode)))?;
                        write_trajectory_csv(f, &steps)?;
                    }
                    if self.cfg.run.checkpoints {
                        self.checkpoint()?.save(&d.join(format!("checkpoint_ep{}.ckpt", self.episode)))?;
                    }
                }
                rows.push(row);
            }
        }
        if let Some(d) = dir {
            if self.cfg.run.checkpoints {
                self.checkpoint()?.save(&d.join("final.ckpt"))?;
            }
        }
        Ok(rows)
    }
}

/// Writes rows under the standard header.
pub fn write_metrics_csv<W: Write>(out: W, m: usize, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(m))?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Result of [`train`]: metrics rows across seeds and the run directory.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Trains every configured seed in turn; writes `config.resolved`,
/// `metrics.csv` and per-seed checkpoints under `dir`.
pub fn train(cfg: &ExperimentConfig, dir: &Path, mut on_row: impl FnMut(&MetricsRow)) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.run.seeds.is_empty() {
        return Err(Error::config("run.seeds", "at least one seed is required"));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.resolved"), cfg.resolved()?)?;
    let m = cfg.env.bounds.len();
    let mut rows = Vec::new();
    for &seed in &cfg.run.seeds {
        let mut t = Trainer::<f64>::new(cfg.clone(), seed)?;
        rows.extend(t.run(Some(&dir.join(format!("seed_{seed}"))), &mut on_row)?);
        write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, m, &rows)?;
    }
    write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, m, &rows)?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        rows,
    })
}
