//! Gradient computations for the base policies, the perturbation inner
//! loop objective, and the baseline update rules.

use crate::autodiff::{Gradients, Tape, Var};
use crate::constraint::{combined_violation, ViolationObjective};
use crate::critic::CentralCritic;
use crate::error::{Error, Result};
use crate::policy::{BaseMode, BaseSource, DecomPolicy, RecordedJoint};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that can score a recorded joint action.
pub trait ActionValue<S: Scalar> {
    /// `[batch, 1]` values of `Q(states, actions)`.
    fn record_q(&self, tape: &mut Tape<S>, states: &Tensor<S>, actions: Var) -> Result<Var>;
}

impl<S: Scalar> ActionValue<S> for CentralCritic<S> {
    fn record_q(&self, tape: &mut Tape<S>, states: &Tensor<S>, actions: Var) -> Result<Var> {
        Ok(self.record(tape, states, actions, None, false)?.0)
    }
}

/// Inputs of a base-policy update.
#[derive(Clone, Debug)]
pub struct PolicyBatch<S: Scalar = f64> {
    pub states: Tensor<S>,
    /// `[batch, obs_dim]` per agent.
    pub obs: Vec<Tensor<S>>,
    /// Stored base actions, `[batch, action_dim]` per agent.
    pub base: Vec<Tensor<S>>,
}

impl<S: Scalar> PolicyBatch<S> {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Surrogate value with per-agent base gradients, aligned with `Mlp::params`.
#[derive(Clone, Debug)]
pub struct Surrogate<S: Scalar = f64> {
    pub value: S,
    pub grads: Vec<Vec<Tensor<S>>>,
    pub grad_norm: S,
}

fn base_grads<S: Scalar>(policy: &DecomPolicy<S>, rec: &RecordedJoint, g: &Gradients<S>) -> (Vec<Vec<Tensor<S>>>, S) {
    let grads: Vec<Vec<Tensor<S>>> = policy
        .base_nets()
        .iter()
        .zip(&rec.base_vars)
        .map(|(net, vars)| net.grads(vars, g))
        .collect();
    let norm = grads.iter().flatten().map(Tensor::sum_squares).sum::<S>().sqrt();
    (grads, norm)
}

/// `mean_l Q(s_l, π(o_l))` with the base actions recomputed from the base nets
/// and pushed through the perturbations.
pub fn deterministic_surrogate<S: Scalar, Q: ActionValue<S> + ?Sized>(
    policy: &DecomPolicy<S>,
    critic: &Q,
    batch: &PolicyBatch<S>,
) -> Result<Surrogate<S>> {
    if policy.config().base_mode != BaseMode::Deterministic {
        return Err(Error::invalid("deterministic update on a stochastic base policy"));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch("deterministic surrogate"));
    }
    let mut tape = Tape::new();
    let rec = policy.record(&mut tape, &batch.obs, BaseSource::Deterministic, true, false)?;
    let q = critic.record_q(&mut tape, &batch.states, rec.joint)?;
    let obj = tape.mean(q);
    let g = tape.backward(obj)?;
    let (grads, grad_norm) = base_grads(policy, &rec, &g);
    Ok(Surrogate {
        value: tape.value(obj).item(),
        grads,
        grad_norm,
    })
}

/// `mean_l [Σ_i log f_i(b_i|o_i)·w_l + Q(s_l, a_l(θ))]` where `a(θ)` uses the
/// fixed noise `ξ` and `w` defaults to the detached value of `Q`.
pub fn stochastic_surrogate<S: Scalar, Q: ActionValue<S> + ?Sized>(
    policy: &DecomPolicy<S>,
    critic: &Q,
    batch: &PolicyBatch<S>,
    noise: &[Tensor<S>],
    weights: Option<&Tensor<S>>,
) -> Result<Surrogate<S>> {
    if policy.config().base_mode != BaseMode::Gaussian {
        return Err(Error::invalid("stochastic update on a deterministic base policy"));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch("stochastic surrogate"));
    }
    let mut tape = Tape::new();
    let rec = policy.record(
        &mut tape,
        &batch.obs,
        BaseSource::Noise {
            noise,
            samples: &batch.base,
        },
        true,
        false,
    )?;
    let q = critic.record_q(&mut tape, &batch.states, rec.joint)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => tape.value(q).clone(),
    };
    let w = tape.constant(w);
    let logps = rec.log_densities.clone().ok_or(Error::invalid("missing log-densities"))?;
    let mut score = logps[0];
    for &l in &logps[1..] {
        score = tape.add(score, l)?;
    }
    let weighted = tape.mul(score, w)?;
    let t1 = tape.mean(weighted);
    let t2 = tape.mean(q);
    let obj = tape.add(t1, t2)?;
    let g = tape.backward(obj)?;
    let (grads, grad_norm) = base_grads(policy, &rec, &g);
    Ok(Surrogate {
        value: tape.value(obj).item(),
        grads,
        grad_norm,
    })
}

/// `m[i][k]`: norm of the surrogate gradient w.r.t. `θ_i` flowing only through
/// agent `k`'s action (all other actions enter the critic as constants).
pub fn gradient_aggregation_check<S: Scalar, Q: ActionValue<S> + ?Sized>(
    policy: &DecomPolicy<S>,
    critic: &Q,
    batch: &PolicyBatch<S>,
) -> Result<Vec<Vec<S>>> {
    let n = policy.n_agents();
    let noise = match policy.config().base_mode {
        BaseMode::Gaussian => Some(policy.solve_noise(&batch.obs, &batch.base)?),
        BaseMode::Deterministic => None,
    };
    let mut out = vec![vec![S::zero(); n]; n];
    for k in 0..n {
        let mut tape = Tape::new();
        let source = match &noise {
            Some(xi) => BaseSource::Noise {
                noise: xi,
                samples: &batch.base,
            },
            None => BaseSource::Deterministic,
        };
        let rec = policy.record(&mut tape, &batch.obs, source, true, false)?;
        let parts: Vec<Var> = rec
            .actions
            .iter()
            .enumerate()
            .map(|(m, &a)| if m == k { a } else { tape.constant(tape.value(a).clone()) })
            .collect();
        let joint = tape.concat_cols(&parts)?;
        let q = critic.record_q(&mut tape, &batch.states, joint)?;
        let obj = tape.mean(q);
        let g = tape.backward(obj)?;
        let (grads, _) = base_grads(policy, &rec, &g);
        for (i, gi) in grads.iter().enumerate() {
            out[i][k] = gi.iter().map(Tensor::sum_squares).sum::<S>().sqrt();
        }
    }
    Ok(out)
}

/// `r + ω·Σ_j c_j` for `ω ≤ 0`.
pub fn fp_shaped_reward(reward: f64, costs: &[f64], weight: f64) -> f64 {
    reward + weight * costs.iter().sum::<f64>()
}

/// `λ_j ← max(0, λ_j + α·(Ĵ_j − D_j))`.
pub fn lagrangian_update(multipliers: &[f64], estimates: &[f64], bounds: &[f64], rate: f64) -> Result<Vec<f64>> {
    if multipliers.len() != estimates.len() || estimates.len() != bounds.len() {
        return Err(Error::ShapeMismatch {
            context: "lagrangian update",
            expected: vec![multipliers.len(); 3],
            found: vec![multipliers.len(), estimates.len(), bounds.len()],
        });
    }
    if multipliers.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::invalid("multipliers must be non-negative"));
    }
    Ok(multipliers
        .iter()
        .zip(estimates.iter().zip(bounds))
        .map(|(&l, (&j, &d))| (l + rate * (j - d)).max(0.0))
        .collect())
}

/// Rows sharing one step index, with their empirical prefix and step costs.
#[derive(Clone, Debug)]
pub struct StepGroup<S: Scalar = f64> {
    pub t: usize,
    pub rows: Vec<usize>,
    /// `mean(prefix_j) − mean(c_j)` per cost.
    pub head: Vec<S>,
}

/// Batch for the perturbation objective: initial-state rows first, then
/// rows grouped by step index for the per-step estimator.
#[derive(Clone, Debug)]
pub struct ViolationBatch<S: Scalar = f64> {
    pub states: Tensor<S>,
    pub obs: Vec<Tensor<S>>,
    pub base: Vec<Tensor<S>>,
    pub initial_rows: usize,
    pub groups: Vec<StepGroup<S>>,
}

/// Combined violation of each cost as a function of the flattened
/// perturbation parameters, with the base actions held fixed.
pub struct PhiObjective<'a, S: Scalar> {
    policy: DecomPolicy<S>,
    critics: &'a [CentralCritic<S>],
    shared: bool,
    bounds: Vec<S>,
    batch: &'a ViolationBatch<S>,
    averaging: Tensor<S>,
    heads: Vec<Tensor<S>>,
    cache: Option<(Vec<S>, Tape<S>, Vec<Var>, Vec<Var>)>,
    pub loss_evaluations: usize,
    pub gradient_evaluations: usize,
}

impl<'a, S: Scalar> PhiObjective<'a, S> {
    /// `critics` holds one critic per cost, or a single shared critic with an index channel.
    pub fn new(policy: &DecomPolicy<S>, critics: &'a [CentralCritic<S>], bounds: &[f64], batch: &'a ViolationBatch<S>) -> Result<Self> {
        let m = bounds.len();
        let shared = critics.len() == 1 && critics[0].index_width() == m && m > 0;
        if !shared && critics.len() != m {
            return Err(Error::invalid("need one cost critic per bound or one shared critic"));
        }
        if batch.initial_rows == 0 {
            return Err(Error::EmptyBatch("perturbation objective"));
        }
        let total = batch.states.rows();
        let g = batch.groups.len();
        let mut avg = Tensor::zeros(1 + g, total);
        let k0 = S::one() / S::cast(batch.initial_rows as f64);
        for r in 0..batch.initial_rows {
            avg.data_mut()[r] = k0;
        }
        for (gi, grp) in batch.groups.iter().enumerate() {
            let k = S::one() / S::cast(grp.rows.len() as f64);
            for &r in &grp.rows {
                avg.data_mut()[(1 + gi) * total + r] = k;
            }
        }
        let heads = (0..m)
            .map(|j| Tensor::column(batch.groups.iter().map(|grp| grp.head[j]).collect()))
            .collect();
        Ok(Self {
            policy: policy.clone(),
            critics,
            shared,
            bounds: bounds.iter().map(|&d| S::cast(d)).collect(),
            batch,
            averaging: avg,
            heads,
            cache: None,
            loss_evaluations: 0,
            gradient_evaluations: 0,
        })
    }

    fn evaluate(&mut self, phi: &[S]) -> Result<()> {
        if self.cache.as_ref().is_some_and(|(p, ..)| p.as_slice() == phi) {
            return Ok(());
        }
        self.policy.assign_perturb_flat(phi)?;
        let mut tape = Tape::new();
        let b = self.batch;
        let rec = self.policy.record(&mut tape, &b.obs, BaseSource::Fixed(&b.base), false, true)?;
        let avg = tape.constant(self.averaging.clone());
        let g = b.groups.len();
        let mut selected = Vec::with_capacity(self.bounds.len());
        for (j, &d) in self.bounds.iter().enumerate() {
            let (critic, index) = if self.shared {
                (&self.critics[0], Some(j))
            } else {
                (&self.critics[j], None)
            };
            let (q, _) = critic.record(&mut tape, &b.states, rec.joint, index, false)?;
            let means = tape.matmul(avg, q)?;
            let m0 = tape.slice_rows(means, 0, 1);
            let shifted = tape.offset(m0, -d);
            let h = tape.relu(shifted);
            let l0 = tape.square(h);
            let chosen = if g == 0 {
                l0
            } else {
                let qt = tape.slice_rows(means, 1, g);
                let head = tape.constant(self.heads[j].clone());
                let est = tape.add(qt, head)?;
                let shifted = tape.offset(est, -d);
                let h = tape.relu(shifted);
                let sq = tape.square(h);
                let lt = tape.mean(sq);
                let v0 = tape.value(l0).item();
                let vt = tape.value(lt).item();
                if combined_violation(v0, &[vt]) == v0 {
                    l0
                } else {
                    lt
                }
            };
            selected.push(chosen);
        }
        let vars: Vec<Var> = rec.perturb_vars.iter().flatten().flat_map(|v| v.vars()).collect();
        self.cache = Some((phi.to_vec(), tape, selected, vars));
        Ok(())
    }
}

impl<S: Scalar> ViolationObjective<S> for PhiObjective<'_, S> {
    fn dim(&self) -> usize {
        self.policy.perturb_nets().iter().map(|m| m.num_params()).sum()
    }

    fn losses(&mut self, phi: &[S]) -> Result<Vec<S>> {
        self.loss_evaluations += 1;
        self.evaluate(phi)?;
        let (_, tape, selected, _) = self.cache.as_ref().expect("evaluated");
        Ok(selected.iter().map(|&v| tape.value(v).item()).collect())
    }

    fn gradient(&mut self, phi: &[S], j: usize) -> Result<Vec<S>> {
        self.gradient_evaluations += 1;
        self.evaluate(phi)?;
        let (_, tape, selected, vars) = self.cache.as_ref().expect("evaluated");
        let out = *selected.get(j).ok_or_else(|| Error::invalid(format!("no cost {j}")))?;
        let g = tape.backward(out)?;
        let mut flat = Vec::with_capacity(self.dim());
        let params = self.policy.perturb_nets().iter().flat_map(|m| m.params());
        for (v, p) in vars.iter().zip(params) {
            flat.extend_from_slice(g.wrt(*v, p).data());
        }
        if flat.len() != self.dim() {
            return Err(Error::invalid("perturbation gradient does not cover every parameter"));
        }
        Ok(flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp_and_lagrangian_examples() {
        assert_eq!(fp_shaped_reward(1.0, &[2.0, 3.0], 0.0), 1.0);
        assert!((fp_shaped_reward(1.0, &[2.0, 3.0], -0.1) - 0.5).abs() < 1e-15);
        assert_eq!(lagrangian_update(&[0.3], &[0.6], &[0.6], 0.1).unwrap(), vec![0.3]);
        assert_eq!(lagrangian_update(&[0.0], &[0.1], &[0.6], 0.1).unwrap(), vec![0.0]);
        let l = lagrangian_update(&[1.0], &[1.1], &[0.6], 0.1).unwrap();
        assert!((l[0] - 1.05).abs() < 1e-15);
        assert!(lagrangian_update(&[-1.0], &[0.0], &[0.0], 0.1).is_err());
    }
}
