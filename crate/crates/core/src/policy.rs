//! Decomposed joint policy: per-agent base policies `f_i`, deterministic
//! perturbations `g_i`, and the composition `a_i = clamp(b_i + λ·g_i(...))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpVars};
use crate::noise::{self, OuProcess};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseMode {
    Deterministic,
    Gaussian,
}

/// What the perturbation network sees besides the agent's own observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Own base action plus the base actions of all neighbors.
    A,
    /// Own base action only.
    N,
    /// Observation only.
    I,
}

impl Variant {
    pub fn perturb_input_dim(self, obs_dim: usize, action_dim: usize, max_degree: usize) -> usize {
        match self {
            Variant::A => obs_dim + action_dim * (1 + max_degree),
            Variant::N => obs_dim + action_dim,
            Variant::I => obs_dim,
        }
    }

    pub fn shares_base_actions(self) -> bool {
        self == Variant::A
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub neighbors: Vec<Vec<usize>>,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub base_mode: BaseMode,
    pub variant: Variant,
    pub lambda: f64,
}

impl PolicyConfig {
    pub fn n_agents(&self) -> usize {
        self.neighbors.len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Half-width of the action box; base and perturbation outputs are scaled by it.
    pub fn scale(&self) -> f64 {
        0.5 * (self.action_high - self.action_low)
    }

    fn validate(&self) -> Result<()> {
        if self.neighbors.is_empty() || self.obs_dim == 0 || self.action_dim == 0 {
            return Err(Error::invalid("policy needs agents, observations and actions"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("λ must be non-negative, got {}", self.lambda)));
        }
        if self.action_low >= self.action_high {
            return Err(Error::invalid("empty action box"));
        }
        for (i, ns) in self.neighbors.iter().enumerate() {
            if ns.contains(&i) || ns.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "neighbors of agent {i} must be sorted and exclude itself"
                )));
            }
        }
        Ok(())
    }
}

/// Per-agent Ornstein-Uhlenbeck exploration for base and (optionally) perturbation outputs.
#[derive(Clone, Debug)]
pub struct Exploration<S: Scalar = f64> {
    pub base: Vec<OuProcess<S>>,
    pub perturb: Option<Vec<OuProcess<S>>>,
}

impl<S: Scalar> Exploration<S> {
    /// Volatilities are in units of the action half-width; a zero
    /// `perturb_volatility` leaves the perturbation noise-free.
    pub fn new(cfg: &PolicyConfig, rate: f64, volatility: f64, perturb_volatility: f64, seed: u64) -> Self {
        let make = |k: u64, volatility: f64| {
            (0..cfg.n_agents())
                .map(|i| {
                    OuProcess::new(
                        cfg.action_dim,
                        S::cast(rate),
                        S::cast(volatility * cfg.scale()),
                        S::zero(),
                        S::one(),
                        seed.wrapping_mul(0x9E37_79B9).wrapping_add(k * 1000 + i as u64),
                    )
                })
                .collect::<Vec<_>>()
        };
        Self {
            base: make(0, volatility),
            perturb: (perturb_volatility > 0.0).then(|| make(1, perturb_volatility)),
        }
    }

    pub fn reset(&mut self) {
        self.base.iter_mut().for_each(OuProcess::reset);
        if let Some(p) = &mut self.perturb {
            p.iter_mut().for_each(OuProcess::reset);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseSample<S: Scalar = f64> {
    pub action: Vec<S>,
    pub log_density: Option<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composed<S: Scalar = f64> {
    pub pre_clamp: Vec<S>,
    pub action: Vec<S>,
}

/// Output of one two-phase joint act.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDecision<S: Scalar = f64> {
    pub base: Vec<Vec<S>>,
    pub pre_clamp: Vec<Vec<S>>,
    pub actions: Vec<Vec<S>>,
    pub log_densities: Option<Vec<S>>,
    /// Broadcast rounds of base actions used to compute `actions`.
    pub broadcast_rounds: usize,
    /// Point-to-point base-action messages sent in those rounds.
    pub messages: usize,
}

/// How the base actions enter a recorded forward pass.
pub enum BaseSource<'a, S: Scalar> {
    /// Given base actions, treated as constants.
    Fixed(&'a [Tensor<S>]),
    /// Recomputed from the deterministic base nets.
    Deterministic,
    /// Gaussian base actions `mean + std·ξ` for fixed noise `ξ`, plus the
    /// log-density of the stored `samples`.
    Noise {
        noise: &'a [Tensor<S>],
        samples: &'a [Tensor<S>],
    },
}

/// Tape handles produced by [`DecomPolicy::record`].
pub struct RecordedJoint {
    pub base: Vec<Var>,
    pub actions: Vec<Var>,
    /// `[batch, n_agents · action_dim]`.
    pub joint: Var,
    pub log_densities: Option<Vec<Var>>,
    pub base_vars: Vec<MlpVars>,
    pub perturb_vars: Vec<Option<MlpVars>>,
}

#[derive(Clone, Debug)]
pub struct DecomPolicy<S: Scalar = f64> {
    cfg: PolicyConfig,
    base: Vec<Mlp<S>>,
    perturb: Vec<Mlp<S>>,
    base_target: Vec<Mlp<S>>,
    perturb_target: Vec<Mlp<S>>,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl<S: Scalar> DecomPolicy<S> {
    pub fn new<R: Rng + ?Sized>(cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.action_dim;
        let (base_out, base_act) = match cfg.base_mode {
            BaseMode::Deterministic => (d, Activation::Tanh),
            BaseMode::Gaussian => (2 * d, Activation::Identity),
        };
        let p_in = cfg.variant.perturb_input_dim(cfg.obs_dim, d, cfg.max_degree());
        let n = cfg.n_agents();
        let base: Vec<Mlp<S>> = (0..n)
            .map(|_| Mlp::new(&sizes(cfg.obs_dim, &cfg.hidden, base_out), cfg.hidden_activation, base_act, rng))
            .collect();
        let perturb: Vec<Mlp<S>> = (0..n)
            .map(|_| Mlp::new(&sizes(p_in, &cfg.hidden, d), cfg.hidden_activation, Activation::Tanh, rng))
            .collect();
        Ok(Self {
            base_target: base.clone(),
            perturb_target: perturb.clone(),
            cfg,
            base,
            perturb,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn n_agents(&self) -> usize {
        self.cfg.n_agents()
    }

    pub fn lambda(&self) -> f64 {
        self.cfg.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!("λ must be non-negative, got {lambda}")));
        }
        self.cfg.lambda = lambda;
        Ok(())
    }

    pub fn base_nets(&self) -> &[Mlp<S>] {
        &self.base
    }

    pub fn base_nets_mut(&mut self) -> &mut [Mlp<S>] {
        &mut self.base
    }

    pub fn perturb_nets(&self) -> &[Mlp<S>] {
        &self.perturb
    }

    pub fn perturb_nets_mut(&mut self) -> &mut [Mlp<S>] {
        &mut self.perturb
    }

    pub fn base_targets(&self) -> &[Mlp<S>] {
        &self.base_target
    }

    pub fn perturb_targets(&self) -> &[Mlp<S>] {
        &self.perturb_target
    }

    /// All perturbation parameters as one flat vector, agent by agent.
    pub fn perturb_flat(&self) -> Vec<S> {
        self.perturb.iter().flat_map(|m| m.flatten()).collect()
    }

    pub fn assign_perturb_flat(&mut self, flat: &[S]) -> Result<()> {
        let total: usize = self.perturb.iter().map(Mlp::num_params).sum();
        if flat.len() != total {
            return Err(Error::ShapeMismatch {
                context: "assign_perturb_flat",
                expected: vec![total],
                found: vec![flat.len()],
            });
        }
        let mut off = 0;
        for m in &mut self.perturb {
            let n = m.num_params();
            m.assign_flat(&flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    fn check_obs(&self, obs: &[S]) -> Result<()> {
        if obs.len() != self.cfg.obs_dim {
            return Err(Error::ShapeMismatch {
                context: "policy observation",
                expected: vec![self.cfg.obs_dim],
                found: vec![obs.len()],
            });
        }
        Ok(())
    }

    fn clamp(&self, v: S) -> S {
        v.max(S::cast(self.cfg.action_low)).min(S::cast(self.cfg.action_high))
    }

    fn base_numeric(&self, nets: &[Mlp<S>], i: usize, obs: &Tensor<S>) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let scale = S::cast(self.cfg.scale());
        let out = nets[i].forward(obs)?;
        Ok(match self.cfg.base_mode {
            BaseMode::Deterministic => (out.scale(scale), None),
            BaseMode::Gaussian => {
                let d = self.cfg.action_dim;
                let mean = out.slice_cols(0, d).map(|v| scale * v.tanh());
                (mean, Some(out.slice_cols(d, d)))
            }
        })
    }

    /// One agent's base action. Exploration adds OU noise to a deterministic
    /// base or draws from the Gaussian head; without it the mean is returned.
    pub fn base_act<R: Rng + ?Sized>(
        &self,
        i: usize,
        obs: &[S],
        explore: Option<&mut Exploration<S>>,
        rng: &mut R,
    ) -> Result<BaseSample<S>> {
        self.check_agent(i)?;
        self.check_obs(obs)?;
        let (mean, log_std) = self.base_numeric(&self.base, i, &Tensor::row(obs.to_vec()))?;
        let sample = match (self.cfg.base_mode, explore, log_std) {
            (BaseMode::Gaussian, Some(_), Some(ls)) => {
                let (b, logp) = noise::gaussian_head_sample(&mean, &ls, rng)?;
                let action = b.into_data().into_iter().map(|v| self.clamp(v)).collect();
                BaseSample {
                    action,
                    log_density: Some(logp.item()),
                }
            }
            (BaseMode::Gaussian, None, Some(ls)) => {
                let logp = noise::gaussian_log_density(&mean, &mean, &ls)?.item();
                BaseSample {
                    action: mean.into_data(),
                    log_density: Some(logp),
                }
            }
            (_, Some(ex), _) => {
                let eps = ex.base[i].sample();
                let action = mean
                    .data()
                    .iter()
                    .zip(eps)
                    .map(|(&m, e)| self.clamp(m + e))
                    .collect();
                BaseSample {
                    action,
                    log_density: None,
                }
            }
            (_, None, _) => BaseSample {
                action: mean.into_data(),
                log_density: None,
            },
        };
        Ok(sample)
    }

    fn check_agent(&self, i: usize) -> Result<()> {
        if i >= self.n_agents() {
            return Err(Error::InvalidAgent {
                id: i,
                n_agents: self.n_agents(),
            });
        }
        Ok(())
    }

    /// Column blocks feeding `g_i`, numeric version.
    fn perturb_input(&self, i: usize, obs: &Tensor<S>, base: &[Tensor<S>]) -> Result<Tensor<S>> {
        let inv = S::one() / S::cast(self.cfg.scale());
        let rows = obs.rows();
        let d = self.cfg.action_dim;
        let mut parts = vec![obs.clone()];
        if self.cfg.variant != Variant::I {
            parts.push(base[i].scale(inv));
        }
        if self.cfg.variant == Variant::A {
            let ns = &self.cfg.neighbors[i];
            for &j in ns {
                parts.push(base[j].scale(inv));
            }
            for _ in ns.len()..self.cfg.max_degree() {
                parts.push(Tensor::zeros(rows, d));
            }
        }
        Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
    }

    fn compose_numeric(
        &self,
        nets: &[Mlp<S>],
        i: usize,
        obs: &Tensor<S>,
        base: &[Tensor<S>],
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let lambda = S::cast(self.cfg.lambda);
        let pre = if self.cfg.lambda == 0.0 {
            base[i].clone()
        } else {
            let g = nets[i].forward(&self.perturb_input(i, obs, base)?)?;
            let k = lambda * S::cast(self.cfg.scale());
            base[i].zip_map(&g, |b, g| b + k * g)
        };
        let action = pre.map(|v| self.clamp(v));
        Ok((pre, action))
    }

    /// `a_i = clamp(b_i + λ·g_i(o_i, b_i, b_{N_i}))` for one agent.
    /// `neighbor_base` lists the base actions of `N_i` in ascending id order.
    pub fn compose(&self, i: usize, obs: &[S], b_i: &[S], neighbor_base: &[Vec<S>]) -> Result<Composed<S>> {
        self.check_agent(i)?;
        self.check_obs(obs)?;
        let ns = &self.cfg.neighbors[i];
        if neighbor_base.len() != ns.len() && self.cfg.variant == Variant::A {
            return Err(Error::ShapeMismatch {
                context: "compose neighbor actions",
                expected: vec![ns.len()],
                found: vec![neighbor_base.len()],
            });
        }
        let d = self.cfg.action_dim;
        let mut base = vec![Tensor::zeros(1, d); self.n_agents()];
        base[i] = Tensor::row(b_i.to_vec());
        if self.cfg.variant == Variant::A {
            for (&j, b) in ns.iter().zip(neighbor_base) {
                base[j] = Tensor::row(b.clone());
            }
        }
        let (pre, action) = self.compose_numeric(&self.perturb, i, &Tensor::row(obs.to_vec()), &base)?;
        Ok(Composed {
            pre_clamp: pre.into_data(),
            action: action.into_data(),
        })
    }

    /// Two-phase act: every agent picks `b_i`, base actions are broadcast
    /// once to neighbors, then each agent applies its perturbation.
    pub fn joint_act<R: Rng + ?Sized>(
        &self,
        obs: &[Vec<S>],
        mut explore: Option<&mut Exploration<S>>,
        rng: &mut R,
    ) -> Result<JointDecision<S>> {
        let n = self.n_agents();
        if obs.len() != n {
            return Err(Error::ShapeMismatch {
                context: "joint_act observations",
                expected: vec![n],
                found: vec![obs.len()],
            });
        }
        let mut base = Vec::with_capacity(n);
        let mut logps = Vec::with_capacity(n);
        for (i, o) in obs.iter().enumerate() {
            let s = self.base_act(i, o, explore.as_deref_mut(), rng)?;
            logps.push(s.log_density);
            base.push(s.action);
        }
        let shares = self.cfg.variant.shares_base_actions() && self.cfg.lambda != 0.0;
        let messages = if shares {
            self.cfg.neighbors.iter().map(Vec::len).sum()
        } else {
            0
        };
        let base_t: Vec<Tensor<S>> = base.iter().map(|b| Tensor::row(b.clone())).collect();
        let mut pre_clamp = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        for (i, o) in obs.iter().enumerate() {
            self.check_obs(o)?;
            let (mut pre, _) = self.compose_numeric(&self.perturb, i, &Tensor::row(o.clone()), &base_t)?;
            if let Some(p) = explore.as_deref_mut().and_then(|e| e.perturb.as_mut()) {
                if self.cfg.lambda != 0.0 {
                    let k = S::cast(self.cfg.lambda);
                    for (v, e) in pre.data_mut().iter_mut().zip(p[i].sample()) {
                        *v += k * e;
                    }
                }
            }
            actions.push(pre.data().iter().map(|&v| self.clamp(v)).collect());
            pre_clamp.push(pre.into_data());
        }
        let log_densities = logps.iter().copied().collect::<Option<Vec<S>>>();
        Ok(JointDecision {
            base,
            pre_clamp,
            actions,
            log_densities,
            broadcast_rounds: usize::from(shares),
            messages,
        })
    }

    /// Batched noise-free joint action from the online or target networks.
    /// `obs[i]` is `[batch, obs_dim]`; the result is `[batch, n·action_dim]`.
    pub fn act_batch(&self, obs: &[Tensor<S>], target: bool) -> Result<Tensor<S>> {
        let (bnets, pnets) = if target {
            (&self.base_target, &self.perturb_target)
        } else {
            (&self.base, &self.perturb)
        };
        let base = obs
            .iter()
            .enumerate()
            .map(|(i, o)| self.base_numeric(bnets, i, o).map(|(m, _)| m))
            .collect::<Result<Vec<_>>>()?;
        let actions = obs
            .iter()
            .enumerate()
            .map(|(i, o)| self.compose_numeric(pnets, i, o, &base).map(|(_, a)| a))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_cols(&actions.iter().collect::<Vec<_>>())
    }

    /// Batched base actions of the online networks, one `[batch, action_dim]`
    /// tensor per agent. A Gaussian base is sampled when `rng` is given and
    /// returns its mean otherwise.
    pub fn base_batch<R: Rng + ?Sized>(&self, obs: &[Tensor<S>], mut rng: Option<&mut R>) -> Result<Vec<Tensor<S>>> {
        obs.iter()
            .enumerate()
            .map(|(i, o)| {
                let (mean, log_std) = self.base_numeric(&self.base, i, o)?;
                Ok(match (log_std, rng.as_deref_mut()) {
                    (Some(ls), Some(r)) => noise::gaussian_head_sample(&mean, &ls, r)?.0.map(|v| self.clamp(v)),
                    _ => mean,
                })
            })
            .collect()
    }

    /// Noise `ξ = (b − mean)/std` that reproduces Gaussian base samples `b`
    /// under the current base networks.
    pub fn solve_noise(&self, obs: &[Tensor<S>], samples: &[Tensor<S>]) -> Result<Vec<Tensor<S>>> {
        if self.cfg.base_mode != BaseMode::Gaussian {
            return Err(Error::invalid("noise is only defined for a Gaussian base policy"));
        }
        obs.iter()
            .zip(samples)
            .enumerate()
            .map(|(i, (o, b))| {
                let (mean, log_std) = self.base_numeric(&self.base, i, o)?;
                let log_std = log_std.expect("gaussian head has a log-std block");
                let lo = S::cast(noise::LOG_STD_MIN);
                let hi = S::cast(noise::LOG_STD_MAX);
                Ok(b.zip_map(&mean, |x, m| x - m)
                    .zip_map(&log_std, |z, l| z / l.max(lo).min(hi).exp()))
            })
            .collect()
    }

    /// Records the joint action on `tape`. Base and perturbation parameters
    /// become trainable leaves only when the matching flag is set.
    pub fn record(
        &self,
        tape: &mut Tape<S>,
        obs: &[Tensor<S>],
        source: BaseSource<'_, S>,
        train_base: bool,
        train_perturb: bool,
    ) -> Result<RecordedJoint> {
        let n = self.n_agents();
        let d = self.cfg.action_dim;
        let scale = S::cast(self.cfg.scale());
        let obs_vars: Vec<Var> = obs.iter().map(|o| tape.constant(o.clone())).collect();
        let mut base_vars = Vec::with_capacity(n);
        let mut base = Vec::with_capacity(n);
        let mut logps = Vec::new();
        for i in 0..n {
            let vars = self.base[i].register(tape, train_base);
            match &source {
                BaseSource::Fixed(b) => base.push(tape.constant(b[i].clone())),
                BaseSource::Deterministic => {
                    if self.cfg.base_mode != BaseMode::Deterministic {
                        return Err(Error::invalid("deterministic recompute of a Gaussian base policy"));
                    }
                    let out = vars.forward(tape, obs_vars[i])?;
                    base.push(tape.scale(out, scale));
                }
                BaseSource::Noise { noise: xi, samples } => {
                    if self.cfg.base_mode != BaseMode::Gaussian {
                        return Err(Error::invalid("reparameterised recompute of a deterministic base policy"));
                    }
                    let raw = vars.forward(tape, obs_vars[i])?;
                    let mean_raw = tape.slice_cols(raw, 0, d);
                    let mean_t = tape.activation(mean_raw, Activation::Tanh);
                    let mean = tape.scale(mean_t, scale);
                    let log_std = tape.slice_cols(raw, d, d);
                    base.push(noise::reparameterized_on_tape(tape, mean, log_std, xi[i].clone())?);
                    let x = tape.constant(samples[i].clone());
                    logps.push(noise::log_density_on_tape(tape, x, mean, log_std)?);
                }
            }
            base_vars.push(vars);
        }
        let inv = S::one() / scale;
        let lambda = S::cast(self.cfg.lambda);
        let mut perturb_vars = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            if self.cfg.lambda == 0.0 {
                perturb_vars.push(None);
                let a = tape.clamp(base[i], S::cast(self.cfg.action_low), S::cast(self.cfg.action_high));
                actions.push(a);
                continue;
            }
            let rows = obs[i].rows();
            let mut parts = vec![obs_vars[i]];
            if self.cfg.variant != Variant::I {
                parts.push(tape.scale(base[i], inv));
            }
            if self.cfg.variant == Variant::A {
                let ns = &self.cfg.neighbors[i];
                for &j in ns {
                    parts.push(tape.scale(base[j], inv));
                }
                for _ in ns.len()..self.cfg.max_degree() {
                    parts.push(tape.constant(Tensor::zeros(rows, d)));
                }
            }
            let input = tape.concat_cols(&parts)?;
            let (g, vars) = self.perturb[i].forward_recorded(tape, input, train_perturb)?;
            let g = tape.scale(g, lambda * scale);
            let pre = tape.add(base[i], g)?;
            actions.push(tape.clamp(pre, S::cast(self.cfg.action_low), S::cast(self.cfg.action_high)));
            perturb_vars.push(Some(vars));
        }
        let joint = tape.concat_cols(&actions)?;
        Ok(RecordedJoint {
            base,
            actions,
            joint,
            log_densities: (!logps.is_empty()).then_some(logps),
            base_vars,
            perturb_vars,
        })
    }

    /// Blends online into target networks: `θ′ ← δ_base·θ + (1 − δ_base)·θ′`, likewise for φ′.
    pub fn soft_update_targets(&mut self, delta_base: f64, delta_perturb: f64) -> Result<()> {
        for (t, o) in self.base_target.iter_mut().zip(&self.base) {
            t.soft_update_from(o, S::cast(delta_base))?;
        }
        for (t, o) in self.perturb_target.iter_mut().zip(&self.perturb) {
            t.soft_update_from(o, S::cast(delta_perturb))?;
        }
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for i in 0..self.n_agents() {
            ckpt.insert_mlp(&format!("base_{i}"), &self.base[i])?;
            ckpt.insert_mlp(&format!("perturb_{i}"), &self.perturb[i])?;
            ckpt.insert_mlp(&format!("base_{i}_target"), &self.base_target[i])?;
            ckpt.insert_mlp(&format!("perturb_{i}_target"), &self.perturb_target[i])?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for i in 0..self.n_agents() {
            ckpt.load_mlp(&format!("base_{i}"), &mut self.base[i])?;
            ckpt.load_mlp(&format!("perturb_{i}"), &mut self.perturb[i])?;
            ckpt.load_mlp(&format!("base_{i}_target"), &mut self.base_target[i])?;
            ckpt.load_mlp(&format!("perturb_{i}_target"), &mut self.perturb_target[i])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant, lambda: f64) -> PolicyConfig {
        PolicyConfig {
            obs_dim: 3,
            action_dim: 2,
            action_low: -1.0,
            action_high: 1.0,
            neighbors: crate::env::fully_connected(3),
            hidden: vec![8],
            hidden_activation: Activation::LeakyRelu,
            base_mode: BaseMode::Deterministic,
            variant,
            lambda,
        }
    }

    #[test]
    fn soft_update_blends_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = DecomPolicy::<f64>::new(cfg(Variant::A, 1.0), &mut rng).unwrap();
        for net in p.base_target.iter_mut().chain(p.perturb_target.iter_mut()) {
            let n = net.num_params();
            net.assign_flat(&vec![0.0; n]).unwrap();
        }
        for net in p.base.iter_mut().chain(p.perturb.iter_mut()) {
            let n = net.num_params();
            net.assign_flat(&vec![1.0; n]).unwrap();
        }
        p.soft_update_targets(0.5, 0.5).unwrap();
        p.soft_update_targets(0.5, 0.5).unwrap();
        assert!(p.base_target[0].flatten().iter().all(|&v| v == 0.75));
        p.soft_update_targets(1.0, 1.0).unwrap();
        assert_eq!(p.perturb_target[2], p.perturb[2]);
        assert!(p.soft_update_targets(0.0, 0.5).is_err());
    }

    #[test]
    fn compose_adds_scaled_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = cfg(Variant::I, 1.0);
        c.action_dim = 1;
        let mut p = DecomPolicy::<f64>::new(c, &mut rng).unwrap();
        // All weights zero and output bias atanh(0.1), so g = 0.1.
        let net = &mut p.perturb[0];
        let n = net.num_params();
        let mut flat = vec![0.0; n];
        flat[n - 1] = 0.1_f64.atanh();
        net.assign_flat(&flat).unwrap();
        let out = p.compose(0, &[0.0; 3], &[0.2], &[vec![0.0], vec![0.0]]).unwrap();
        assert!((out.action[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DecomPolicy::<f64>::new(cfg(Variant::N, 1.0), &mut rng).unwrap();
        let mut ckpt = Checkpoint::new();
        p.save_into(&mut ckpt).unwrap();
        assert!(ckpt.get("perturb_2_target").is_some());
        let mut q = DecomPolicy::<f64>::new(cfg(Variant::N, 1.0), &mut rng).unwrap();
        q.load_from(&ckpt).unwrap();
        assert_eq!(q.base, p.base);
        assert_eq!(q.perturb_target, p.perturb_target);
    }
}
