//! Scaled safe-collection run: DeCOM-A against an unconstrained baseline.

use std::time::{Duration, Instant};

use super::CheckOutcome;
use crate::config::{AlgoKind, ExperimentConfig, PhiOptimizer};
use crate::env::EnvKind;
use crate::error::Result;
use crate::trainer::{LrSchedule, Trainer};

/// Two hunters, one fixed unsafe disc, discounted bound 0.6.
pub fn scaled_ctc_safe(variant: AlgoKind, episodes: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(EnvKind::CtcSafe);
    cfg.env.bounds = vec![0.6];
    cfg.env.ctc.n_hunters = 2;
    cfg.env.ctc.n_unsafe = 1;
    // Off-centre, so an untrained policy starts outside it.
    cfg.env.ctc.unsafe_centers = Some(vec![[0.5, 0.5]]);
    cfg.env.ctc.unsafe_diameters = Some(vec![0.8]);
    cfg.algo.variant = variant;
    cfg.algo.fp_weight = 0.0;
    cfg.algo.shared_cost_critic = false;
    cfg.algo.batch_size = 256;
    cfg.algo.buffer_capacity = 100_000;
    cfg.algo.train_every = 4;
    cfg.algo.hidden = vec![64, 64];
    cfg.algo.lr.perturb = LrSchedule::constant(0.003);
    cfg.algo.lr.cost_critic = LrSchedule::constant(0.003);
    cfg.algo.phi_optimizer = PhiOptimizer::Adam;
    cfg.run.episodes = episodes;
    cfg.run.eval_interval = episodes;
    cfg.run.eval_episodes = 50;
    cfg
}

#[derive(Clone, Debug)]
pub struct EndToEndOptions {
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for EndToEndOptions {
    fn default() -> Self {
        Self {
            episodes: 5000,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub decom_reward: f64,
    pub decom_cost: f64,
    pub fp_reward: f64,
    pub fp_cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EndToEndReport {
    pub bound: f64,
    pub seeds: Vec<SeedOutcome>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

impl EndToEndReport {
    /// Seeds whose DeCOM-A cost is within the bound plus 10%.
    pub fn decom_within(&self) -> usize {
        self.seeds.iter().filter(|s| s.decom_cost <= 1.1 * self.bound).count()
    }

    pub fn fp_exceeding(&self) -> usize {
        self.seeds.iter().filter(|s| s.fp_cost > self.bound).count()
    }

    pub fn decom_reward(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.decom_reward))
    }

    pub fn fp_reward(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.fp_reward))
    }

    pub fn passed(&self) -> bool {
        let need = (2 * self.seeds.len()).div_ceil(3);
        self.decom_within() >= need && self.fp_exceeding() >= need && self.fp_reward() > self.decom_reward()
    }
}

fn final_eval(cfg: ExperimentConfig, seed: u64) -> Result<(f64, f64)> {
    let mut trainer = Trainer::<f64>::new(cfg, seed)?;
    let rows = trainer.run(None, |_| {})?;
    let last = rows.last().expect("run always ends with an evaluation");
    Ok((last.eval.reward_mean, last.eval.cost_mean[0]))
}

/// Trains both algorithms on every seed; `progress` sees each finished seed.
pub fn run_end_to_end(opts: &EndToEndOptions, mut progress: impl FnMut(&SeedOutcome)) -> Result<EndToEndReport> {
    let decom = scaled_ctc_safe(AlgoKind::DecomA, opts.episodes);
    let bound = decom.env.bounds[0];
    let mut seeds = Vec::with_capacity(opts.seeds.len());
    for &seed in &opts.seeds {
        let (decom_reward, decom_cost) = final_eval(decom.clone(), seed)?;
        let (fp_reward, fp_cost) = final_eval(scaled_ctc_safe(AlgoKind::Fp, opts.episodes), seed)?;
        let out = SeedOutcome {
            seed,
            decom_reward,
            decom_cost,
            fp_reward,
            fp_cost,
        };
        progress(&out);
        seeds.push(out);
    }
    Ok(EndToEndReport { bound, seeds })
}

/// Criterion 8.
pub fn check_end_to_end(opts: &EndToEndOptions, progress: impl FnMut(&SeedOutcome)) -> Result<CheckOutcome> {
    let t0 = Instant::now();
    let r = run_end_to_end(opts, progress)?;
    let costs = |f: fn(&SeedOutcome) -> f64| r.seeds.iter().map(|s| format!("{:.2}", f(s))).collect::<Vec<_>>().join("/");
    Ok(CheckOutcome {
        id: 8,
        name: "scaled safe collection",
        within_tolerance: r.passed(),
        observed: format!(
            "DeCOM-A cost {} ({} within), FP-0 cost {} ({} above); reward DeCOM-A {:.2} vs FP-0 {:.2}",
            costs(|s| s.decom_cost),
            r.decom_within(),
            costs(|s| s.fp_cost),
            r.fp_exceeding(),
            r.decom_reward(),
            r.fp_reward()
        ),
        bound: format!("DeCOM-A ≤ {:.2} and FP-0 > {:.2} in ≥ 2/3 seeds, FP-0 reward higher", 1.1 * r.bound, r.bound),
        elapsed: t0.elapsed(),
        time_limit: Duration::from_secs(1200),
    })
}
