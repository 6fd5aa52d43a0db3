//! Episode collection and trajectory output.

use std::io::Write;

use rand::Rng;

use super::buffer::Transition;
use crate::env::{Ccmg, JointAction};
use crate::error::Result;
use crate::policy::{DecomPolicy, Exploration};
use crate::scalar::Scalar;

/// Per-episode sums of the team reward and costs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub steps: usize,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub discounted_reward: f64,
    pub discounted_costs: Vec<f64>,
}

/// One step of one episode, for trajectory dumps.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub obs: Vec<Vec<f64>>,
    pub base: Vec<Vec<f64>>,
    pub action: Vec<Vec<f64>>,
    pub reward: f64,
    pub costs: Vec<f64>,
}

fn to_s<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::cast(x)).collect()
}

fn to_f64<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Resets `env` with `env_seed`, runs one episode with the two-phase act
/// protocol and hands every step to `sink`. Discounting uses the game's `γ`.
pub fn collect_episode<S: Scalar, R: Rng + ?Sized>(
    env: &mut dyn Ccmg,
    policy: &DecomPolicy<S>,
    mut explore: Option<&mut Exploration<S>>,
    rng: &mut R,
    env_seed: u64,
    sink: &mut dyn FnMut(Transition, StepRecord),
) -> Result<EpisodeStats> {
    let spec = env.spec().clone();
    let m = spec.cost_count;
    env.reset(env_seed);
    if let Some(e) = explore.as_deref_mut() {
        e.reset();
    }
    let mut stats = EpisodeStats {
        costs: vec![0.0; m],
        discounted_costs: vec![0.0; m],
        ..EpisodeStats::default()
    };
    let mut state = env.global_state();
    let mut obs = env.observe_all()?;
    let mut discount = 1.0;
    loop {
        let obs_s: Vec<Vec<S>> = obs.iter().map(|o| to_s(o)).collect();
        let d = policy.joint_act(&obs_s, explore.as_deref_mut(), rng)?;
        let base: Vec<Vec<f64>> = d.base.iter().map(|b| to_f64(b)).collect();
        let action: Vec<Vec<f64>> = d.actions.iter().map(|a| to_f64(a)).collect();
        let t = env.time();
        let out = env.step(&JointAction(action.clone()))?;
        let next_obs = env.observe_all()?;
        stats.steps += 1;
        stats.reward += out.team_reward;
        stats.discounted_reward += discount * out.team_reward;
        for j in 0..m {
            stats.costs[j] += out.team_costs[j];
            stats.discounted_costs[j] += discount * out.team_costs[j];
        }
        discount *= spec.gamma;
        let tr = Transition {
            state: std::mem::take(&mut state),
            obs: obs.concat(),
            base: base.concat(),
            action: action.concat(),
            reward: out.team_reward,
            costs: out.team_costs.clone(),
            next_state: out.next_state.clone(),
            next_obs: next_obs.concat(),
            done: out.done,
            t,
            cost_prefix: stats.costs.clone(),
        };
        let rec = StepRecord {
            t,
            obs: std::mem::replace(&mut obs, next_obs),
            base,
            action,
            reward: out.team_reward,
            costs: out.team_costs,
        };
        sink(tr, rec);
        state = out.next_state;
        if out.done {
            return Ok(stats);
        }
    }
}

/// Header and rows `(episode, t, agent, obs…, base_action…, action…, reward, cost_1..cost_M)`.
pub fn write_trajectory_csv<W: Write>(out: W, episodes: &[Vec<StepRecord>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let first = episodes.iter().flatten().next();
    let (no, na, m) = first.map_or((0, 0, 0), |r| (r.obs[0].len(), r.action[0].len(), r.costs.len()));
    let mut header = vec!["episode".to_string(), "t".into(), "agent".into()];
    header.extend((0..no).map(|k| format!("obs_{k}")));
    header.extend((0..na).map(|k| format!("base_action_{k}")));
    header.extend((0..na).map(|k| format!("action_{k}")));
    header.push("reward".into());
    header.extend((1..=m).map(|j| format!("cost_{j}")));
    w.write_record(&header)?;
    for (e, ep) in episodes.iter().enumerate() {
        for r in ep {
            for i in 0..r.obs.len() {
                let mut row = vec![e.to_string(), r.t.to_string(), i.to_string()];
                row.extend(r.obs[i].iter().map(f64::to_string));
                row.extend(r.base[i].iter().map(f64::to_string));
                row.extend(r.action[i].iter().map(f64::to_string));
                row.push(r.reward.to_string());
                row.extend(r.costs.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
