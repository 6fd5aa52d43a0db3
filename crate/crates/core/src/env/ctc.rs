//! Cooperative treasure collection with unsafe regions or an unfairness cost.
//!
//! Hunters (ids `0..n_hunters`) pick up treasures and carry them to banks
//! (the remaining ids). An action is the target coordinate an agent moves
//! towards; with `move_gain = 1` it arrives there in one step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dist, fully_connected, radius_graph, Ccmg, CcmgSpec, JointAction, StepOutcome};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtcMode {
    /// One indicator cost per unsafe region.
    Safe,
    /// A single cost: spread of accumulated travel distance.
    Fair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtcParams {
    pub n_hunters: usize,
    pub n_banks: usize,
    pub n_treasures: usize,
    pub n_unsafe: usize,
    pub episode_len: usize,
    pub gamma: f64,
    pub move_gain: f64,
    pub collect_radius: f64,
    pub deposit_radius: f64,
    pub collision_radius: f64,
    pub collision_penalty: f64,
    pub collect_reward: f64,
    pub deposit_reward: f64,
    /// Weight of the dense distance-to-goal penalty.
    pub shaping: f64,
    pub unsafe_diameter_min: f64,
    pub unsafe_diameter_max: f64,
    /// Fixed region centres; drawn at every reset when absent.
    pub unsafe_centers: Option<Vec<[f64; 2]>>,
    pub unsafe_diameters: Option<Vec<f64>>,
    /// Neighbors within this distance at reset; fully connected when absent.
    pub neighbor_radius: Option<f64>,
}

impl Default for CtcParams {
    fn default() -> Self {
        Self {
            n_hunters: 3,
            n_banks: 1,
            n_treasures: 3,
            n_unsafe: 3,
            episode_len: 25,
            gamma: 0.99,
            move_gain: 1.0,
            collect_radius: 0.15,
            deposit_radius: 0.2,
            collision_radius: 0.05,
            collision_penalty: 1.0,
            collect_reward: 1.0,
            deposit_reward: 2.0,
            shaping: 0.1,
            unsafe_diameter_min: 0.2,
            unsafe_diameter_max: 0.5,
            unsafe_centers: None,
            unsafe_diameters: None,
            neighbor_radius: None,
        }
    }
}

impl CtcParams {
    pub fn validate(&self, mode: CtcMode) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.n_hunters == 0 || self.n_banks == 0 {
            return bad("ctc needs at least one hunter and one bank");
        }
        if self.n_treasures == 0 || self.episode_len == 0 {
            return bad("ctc needs treasures and a positive horizon");
        }
        if !(self.move_gain > 0.0 && self.move_gain <= 1.0) {
            return bad("move_gain must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if mode == CtcMode::Safe {
            if self.n_unsafe == 0 {
                return bad("ctc-safe needs at least one unsafe region");
            }
            if !(0.0 < self.unsafe_diameter_min && self.unsafe_diameter_min <= self.unsafe_diameter_max) {
                return bad("unsafe diameter range must be positive and ordered");
            }
            if let Some(c) = &self.unsafe_centers {
                if c.len() != self.n_unsafe {
                    return bad("unsafe_centers must list one centre per region");
                }
            }
            if let Some(d) = &self.unsafe_diameters {
                if d.len() != self.n_unsafe || d.iter().any(|&v| !(v > 0.0)) {
                    return bad("unsafe_diameters must list one positive diameter per region");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ctc {
    mode: CtcMode,
    params: CtcParams,
    spec: CcmgSpec,
    rng: ChaCha8Rng,
    t: usize,
    pos: Vec<[f64; 2]>,
    carrying: Vec<bool>,
    treasures: Vec<[f64; 2]>,
    unsafe_centers: Vec<[f64; 2]>,
    unsafe_radii: Vec<f64>,
    travelled: Vec<f64>,
}

fn uniform_point(rng: &mut ChaCha8Rng, half: f64) -> [f64; 2] {
    [rng.random_range(-half..=half), rng.random_range(-half..=half)]
}

impl Ctc {
    pub fn new(mode: CtcMode, params: CtcParams) -> Result<Self> {
        params.validate(mode)?;
        let n = params.n_hunters + params.n_banks;
        let others = n - 1;
        let k = params.n_treasures;
        let mut obs_dim = 5 + 3 * others + 2 * k;
        let mut state_dim = 3 * n + 2 * k + 1;
        let cost_count = match mode {
            CtcMode::Safe => {
                obs_dim += 4 * params.n_unsafe;
                state_dim += 3 * params.n_unsafe;
                params.n_unsafe
            }
            CtcMode::Fair => {
                obs_dim += others;
                state_dim += n;
                1
            }
        };
        let spec = CcmgSpec {
            n_agents: n,
            cost_count,
            obs_dim,
            state_dim,
            action_dim: 2,
            action_low: -1.0,
            action_high: 1.0,
            episode_len: params.episode_len,
            gamma: params.gamma,
            neighbors: fully_connected(n),
        };
        let mut env = Self {
            mode,
            params,
            spec,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            pos: vec![[0.0; 2]; n],
            carrying: vec![false; n],
            treasures: vec![],
            unsafe_centers: vec![],
            unsafe_radii: vec![],
            travelled: vec![0.0; n],
        };
        env.reset(0);
        Ok(env)
    }

    pub fn mode(&self) -> CtcMode {
        self.mode
    }

    pub fn params(&self) -> &CtcParams {
        &self.params
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.pos
    }

    pub fn treasures(&self) -> &[[f64; 2]] {
        &self.treasures
    }

    pub fn unsafe_regions(&self) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        self.unsafe_centers.iter().copied().zip(self.unsafe_radii.iter().copied())
    }

    /// Accumulated travel distance per agent in this episode.
    pub fn travelled(&self) -> &[f64] {
        &self.travelled
    }

    pub fn is_hunter(&self, i: usize) -> bool {
        i < self.params.n_hunters
    }

    fn in_region(&self, p: [f64; 2], j: usize) -> bool {
        dist(p, self.unsafe_centers[j]) <= self.unsafe_radii[j]
    }

    fn nearest(points: &[[f64; 2]], p: [f64; 2]) -> Option<(usize, f64)> {
        points
            .iter()
            .enumerate()
            .map(|(k, &q)| (k, dist(p, q)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn banks(&self) -> &[[f64; 2]] {
        &self.pos[self.params.n_hunters..]
    }
}

impl Ccmg for Ctc {
    fn name(&self) -> &'static str {
        match self.mode {
            CtcMode::Safe => "ctc-safe",
            CtcMode::Fair => "ctc-fair",
        }
    }

    fn spec(&self) -> &CcmgSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.spec.n_agents;
        self.t = 0;
        self.pos = (0..n).map(|_| uniform_point(&mut self.rng, 1.0)).collect();
        self.carrying = vec![false; n];
        self.travelled = vec![0.0; n];
        self.treasures = (0..self.params.n_treasures)
            .map(|_| uniform_point(&mut self.rng, 1.0))
            .collect();
        if self.mode == CtcMode::Safe {
            let u = self.params.n_unsafe;
            self.unsafe_centers = match &self.params.unsafe_centers {
                Some(c) => c.clone(),
                None => (0..u).map(|_| uniform_point(&mut self.rng, 0.8)).collect(),
            };
            let (lo, hi) = (self.params.unsafe_diameter_min, self.params.unsafe_diameter_max);
            self.unsafe_radii = match &self.params.unsafe_diameters {
                Some(d) => d.iter().map(|v| 0.5 * v).collect(),
                None => (0..u).map(|_| 0.5 * self.rng.random_range(lo..=hi)).collect(),
            };
        }
        self.spec.neighbors = match self.params.neighbor_radius {
            Some(r) => radius_graph(&self.pos, r),
            None => fully_connected(n),
        };
        self.global_state()
    }

    fn step(&mut self, action: &JointAction) -> Result<StepOutcome> {
        if self.t >= self.spec.episode_len {
            return Err(Error::invalid("step called on a finished episode"));
        }
        let action = action.clamped(&self.spec)?;
        let n = self.spec.n_agents;
        let p = &self.params;
        let mut rewards = vec![0.0; n];

        for (i, a) in action.0.iter().enumerate() {
            let old = self.pos[i];
            let keep = 1.0 - p.move_gain;
            let new = [
                p.move_gain * a[0] + keep * old[0],
                p.move_gain * a[1] + keep * old[1],
            ];
            self.travelled[i] += dist(old, new);
            self.pos[i] = new;
        }

        // Pick-ups.
        for i in 0..p.n_hunters {
            if self.carrying[i] {
                continue;
            }
            if let Some((k, d)) = Self::nearest(&self.treasures, self.pos[i]) {
                if d <= p.collect_radius {
                    self.carrying[i] = true;
                    rewards[i] += p.collect_reward;
                    self.treasures[k] = uniform_point(&mut self.rng, 1.0);
                }
            }
        }

        // Deposits pay every agent.
        let mut deposits = 0usize;
        for i in 0..p.n_hunters {
            if self.carrying[i] {
                let near_bank = Self::nearest(self.banks(), self.pos[i])
                    .is_some_and(|(_, d)| d <= p.deposit_radius);
                if near_bank {
                    self.carrying[i] = false;
                    deposits += 1;
                }
            }
        }
        for r in rewards.iter_mut() {
            *r += p.deposit_reward * deposits as f64;
        }

        for i in 0..p.n_hunters {
            for k in (i + 1)..p.n_hunters {
                if dist(self.pos[i], self.pos[k]) <= p.collision_radius {
                    rewards[i] -= p.collision_penalty;
                    rewards[k] -= p.collision_penalty;
                }
            }
        }

        if p.shaping != 0.0 {
            let carriers: Vec<[f64; 2]> = (0..p.n_hunters)
                .filter(|&i| self.carrying[i])
                .map(|i| self.pos[i])
                .collect();
            for i in 0..n {
                let goal = if !self.is_hunter(i) {
                    Self::nearest(&carriers, self.pos[i])
                } else if self.carrying[i] {
                    Self::nearest(self.banks(), self.pos[i])
                } else {
                    Self::nearest(&self.treasures, self.pos[i])
                };
                if let Some((_, d)) = goal {
                    rewards[i] -= p.shaping * d;
                }
            }
        }

        let costs: Vec<Vec<f64>> = match self.mode {
            CtcMode::Safe => (0..n)
                .map(|i| {
                    (0..self.unsafe_centers.len())
                        .map(|j| if self.in_region(self.pos[i], j) { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
            CtcMode::Fair => {
                let hi = self.travelled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = self.travelled.iter().copied().fold(f64::INFINITY, f64::min);
                vec![vec![hi - lo]; n]
            }
        };

        self.t += 1;
        let done = self.t >= self.spec.episode_len;
        Ok(StepOutcome::from_individual(rewards, costs, self.global_state(), done))
    }

    fn observe(&self, agent: usize) -> Result<Vec<f64>> {
        self.spec.check_agent(agent)?;
        let me = self.pos[agent];
        let mut o = Vec::with_capacity(self.spec.obs_dim);
        o.extend_from_slice(&me);
        o.push(self.t as f64 / self.spec.episode_len as f64);
        o.push(if self.is_hunter(agent) { 1.0 } else { 0.0 });
        o.push(if self.carrying[agent] { 1.0 } else { 0.0 });
        for j in (0..self.spec.n_agents).filter(|&j| j != agent) {
            o.push(self.pos[j][0] - me[0]);
            o.push(self.pos[j][1] - me[1]);
            o.push(if self.carrying[j] { 1.0 } else { 0.0 });
        }
        for t in &self.treasures {
            o.push(t[0] - me[0]);
            o.push(t[1] - me[1]);
        }
        match self.mode {
            CtcMode::Safe => {
                for (c, r) in self.unsafe_regions() {
                    o.push(c[0] - me[0]);
                    o.push(c[1] - me[1]);
                    o.push(r);
                    o.push(dist(me, c) - r);
                }
            }
            CtcMode::Fair => {
                for j in (0..self.spec.n_agents).filter(|&j| j != agent) {
                    o.push(self.travelled[j] - self.travelled[agent]);
                }
            }
        }
        debug_assert_eq!(o.len(), self.spec.obs_dim);
        Ok(o)
    }

    fn global_state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.spec.state_dim);
        for p in &self.pos {
            s.extend_from_slice(p);
        }
        s.extend(self.carrying.iter().map(|&c| if c { 1.0 } else { 0.0 }));
        for t in &self.treasures {
            s.extend_from_slice(t);
        }
        s.push(self.t as f64 / self.spec.episode_len as f64);
        match self.mode {
            CtcMode::Safe => {
                for (c, r) in self.unsafe_regions() {
                    s.extend_from_slice(&c);
                    s.push(r);
                }
            }
            CtcMode::Fair => s.extend_from_slice(&self.travelled),
        }
        debug_assert_eq!(s.len(), self.spec.state_dim);
        s
    }

    fn time(&self) -> usize {
        self.t
    }
}
